use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ensembench::config::{parse_config, ExperimentConfig};
use ensembench::results::parse_csv;
use ensembench::run::{self, Options, RunDir};
use ensembench::Error;

fn config(out: &Path) -> ExperimentConfig {
    parse_config(&format!(
        "dataset = synthetic\nfamily = resnet\ndepth = 8\nwidth = 3\nn_per_class = 4\nmembers = 2\nseeds = 1, 2\n\
         epochs = 2\nsynthetic_classes = 3\nsynthetic_size = 8\nsynthetic_train_per_class = 6\n\
         synthetic_test_per_class = 4\nsensitivity_cap = 8\ntsne_perplexity = 2\ntsne_iterations = 60\n\
         oracle_epochs = 1\nout = {}\n",
        out.display()
    ))
    .unwrap()
}

/// Every file under `root`, keyed by relative path.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut m = BTreeMap::new();
    walk(root, root, &mut m);
    m
}

/// Drops the timing columns and lines, which are the only intended
/// differences between identical runs.
fn mask_timing(path: &Path, bytes: &[u8]) -> Vec<u8> {
    let text = String::from_utf8_lossy(bytes);
    let name = path.to_string_lossy();
    let lines: Vec<String> = if name.ends_with("results.csv") {
        text.lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    } else if name.ends_with("ensemble.manifest") {
        text.lines()
            .filter(|l| !l.starts_with("wall_seconds"))
            .map(String::from)
            .collect()
    } else {
        return bytes.to_vec();
    };
    lines.join("\n").into_bytes()
}

fn full_pipeline(cfg: &ExperimentConfig, opts: Options) {
    run::cmd_train(cfg, opts).unwrap();
    run::cmd_sensitivity(cfg, opts).unwrap();
    run::cmd_eval(cfg, opts).unwrap();
    run::cmd_train_oracle(cfg, opts).unwrap();
    run::cmd_embed(cfg, opts).unwrap();
}

#[test]
fn pipeline_is_idempotent_and_worker_count_invariant() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = config(a.path());
    let cb = config(b.path());
    assert_eq!(ca.fingerprint(), cb.fingerprint());

    full_pipeline(
        &ca,
        Options {
            force: false,
            workers: 1,
        },
    );
    let root = RunDir::path_for(&ca);
    let first = snapshot(&root);
    let rows = parse_csv(&String::from_utf8_lossy(&first[Path::new("results.csv")])).unwrap();
    assert_eq!(rows.len(), run::jobs(&ca).unwrap().len());
    for r in &rows {
        assert!((0.0..=1.0).contains(&r.accuracy.unwrap()));
        assert!(r.mean_sensitivity.unwrap().is_finite());
    }
    assert!(first.contains_key(Path::new("plots/classes.svg")));
    assert!(first.contains_key(Path::new("summary.json")));

    let outcome = run::cmd_train(
        &ca,
        Options {
            force: false,
            workers: 1,
        },
    )
    .unwrap();
    assert!(outcome.trained.is_empty());
    full_pipeline(
        &ca,
        Options {
            force: false,
            workers: 1,
        },
    );
    assert_eq!(snapshot(&root), first, "rerun without --force changed artifacts");

    full_pipeline(
        &cb,
        Options {
            force: false,
            workers: 4,
        },
    );
    let second = snapshot(&RunDir::path_for(&cb));
    assert_eq!(first.keys().collect::<Vec<_>>(), second.keys().collect::<Vec<_>>());
    for (path, bytes) in &first {
        let (x, y) = (mask_timing(path, bytes), mask_timing(path, &second[path]));
        assert!(
            x == y,
            "{} differs:\n{}\n---\n{}",
            path.display(),
            String::from_utf8_lossy(&x),
            String::from_utf8_lossy(&y)
        );
    }
}

#[test]
fn commands_report_missing_prerequisites() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let opts = Options::default();
    assert!(matches!(run::cmd_eval(&cfg, opts), Err(Error::Prerequisite(_))));
    assert!(matches!(run::cmd_sensitivity(&cfg, opts), Err(Error::Prerequisite(_))));
    assert!(matches!(run::cmd_embed(&cfg, opts), Err(Error::Prerequisite(_))));

    let mut cifar = cfg.clone();
    cifar.dataset = "cifar10".parse().unwrap();
    cifar.base.input = [32, 32, 3];
    cifar.base.num_classes = 10;
    cifar.data_path = Some(dir.path().join("nowhere"));
    match run::cmd_train(&cifar, opts) {
        Err(Error::Prerequisite(msg)) => assert!(msg.contains("data_batch_1.bin"), "{}", msg),
        other => panic!("{:?}", other),
    }
}

#[test]
fn cli_plan_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("exp.cfg");
    fs::write(
        &cfg_path,
        "dataset = cifar10\nfamily = resnet\ndepth = 8\nwidth = 16\nn_per_class = 10\nmembers = 1, 5, 20\n",
    )
    .unwrap();
    let bin = env!("CARGO_BIN_EXE_ensembench");
    let out = Command::new(bin)
        .args(["plan", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.path().join("runs"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("resnet-110-16") || stdout.contains("resnet-104-16") || stdout.contains("resnet-116-16"));
    let plan_csv = fs::read_dir(dir.path().join("runs"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path()
        .join("plan.csv");
    let rows = parse_csv(&fs::read_to_string(plan_csv).unwrap()).unwrap();
    assert_eq!(rows.len(), 1 + 4 + 4);
    assert!(rows.iter().all(|r| r.accuracy.is_none()));

    fs::write(&cfg_path, "dataset = cifar10\nfamily = resnet\ndepth = 8\nwidht = 16\n").unwrap();
    let out = Command::new(bin)
        .args(["train", "--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 4"));

    fs::write(
        &cfg_path,
        "dataset = cifar10\nfamily = resnet\ndepth = 8\nwidth = 16\nn_per_class = 10\nmembers = 5\n",
    )
    .unwrap();
    let out = Command::new(bin)
        .args(["train", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.path().join("runs"))
        .env("ENSEMBENCH_DATA", dir.path().join("empty"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data_batch_1.bin"));
}
