//! Drives the `spatial` binary end to end on a small synthetic CIFAR-10.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spatial_reasoning::datasets::synthetic;
use spatial_reasoning::experiment::read_rows;
use spatial_reasoning::representation::EmbeddingFile;

fn spatial(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spatial"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("SPATIAL_DATA_ROOT")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(out.status.success(), "exit {:?}\n{stdout}\n{}", out.status, String::from_utf8_lossy(&out.stderr));
    stdout
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = "m = 8\nk = 2\nn = 2\nepochs = 1\nblocks_per_stage = 1\nbase_width = 4\ncheckpoint_every = 1\n";

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    work: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    synthetic::write_cifar10(&root, 8, 16, 1).unwrap();
    let work = dir.path().join("work");
    std::fs::create_dir_all(&work).unwrap();
    Fixture { root, work, _dir: dir }
}

fn pretrained(f: &Fixture) -> PathBuf {
    let out = f.work.join("run");
    let cfg = format!(
        "dataset = \"cifar10\"\noutput_dir = {:?}\ndata_root = {:?}\n{TINY}",
        s(&out),
        s(&f.root)
    );
    let path = f.work.join("run.toml");
    std::fs::write(&path, cfg).unwrap();
    let stdout = ok(&spatial(&["pretrain", "--config", s(&path)]));
    let ck = PathBuf::from(stdout.lines().last().unwrap().trim());
    assert!(ck.exists(), "{stdout}");
    ck
}

#[test]
fn verify_pairs_reports_counts() {
    let out = ok(&spatial(&["verify-pairs", "--m", "64", "--k", "4", "--n", "3"]));
    assert!(out.contains("formula 960") && out.contains("emitted 960"), "{out}");
    let out = ok(&spatial(&["verify-pairs", "--m", "4", "--k", "2", "--n", "0"]));
    assert!(out.contains("emitted 8"), "{out}");
}

#[test]
fn dump_pairs_writes_one_row_per_pair() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pairs.csv");
    ok(&spatial(&["dump-pairs", "--m", "2", "--k", "2", "--n", "3", "--image-side", "32", "--out", s(&path)]));
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 2 + 2 * 3);
}

#[test]
fn bad_arguments_fail() {
    assert!(!spatial(&["verify-pairs", "--m", "4"]).status.success());
    let out = spatial(&["ingest", "--dataset", "cifar10"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--data-root"));
}

#[test]
fn ingest_reports_splits() {
    let f = fixture();
    let out = ok(&spatial(&["ingest", "--dataset", "cifar10", "--data-root", s(&f.root)]));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(out.contains("40") && out.contains("16"), "{v}");
}

#[test]
fn pretrain_embed_and_probe() {
    let f = fixture();
    let ck = pretrained(&f);

    let emb = f.work.join("test.emb");
    ok(&spatial(&[
        "embed", "--checkpoint", s(&ck), "--dataset", "cifar10", "--split", "test", "--n-patches", "3",
        "--data-root", s(&f.root), "--out", s(&emb),
    ]));
    let file = EmbeddingFile::load(&emb).unwrap();
    assert_eq!(file.rows.len(), 16);
    assert_eq!(file.n_patches, 3);
    assert_eq!(file.width(), 4 * file.feature_dim as usize);

    let json = f.work.join("probe.json");
    let csv = f.work.join("probe.csv");
    ok(&spatial(&[
        "linear-eval", "--checkpoint", s(&ck), "--task", "cifar10", "--n-patches", "1", "--seeds", "0,1",
        "--epochs", "2", "--data-root", s(&f.root), "--json", s(&json), "--csv", s(&csv),
    ]));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["per_seed"].as_array().unwrap().len(), 2);
    assert_eq!(v["incomplete"], false);
    let acc = v["test_mean"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&acc));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 2);
}

#[test]
fn manifest_run_and_report() {
    let f = fixture();
    let out = f.work.join("sweep");
    let manifest = f.work.join("m.toml");
    std::fs::write(
        &manifest,
        format!(
            "name = \"tiny sweep\"\noutput_dir = {:?}\nseeds = [0, 1]\n\n[base]\ndataset = \"cifar10\"\ndata_root = {:?}\n{TINY}\n[probe]\nepochs = 2\n\n[sweep]\nn_patches = [0, 1]\n\n[[reference]]\nlabel = \"target\"\nvalues = [10.0, 12.0]\n",
            s(&out),
            s(&f.root)
        ),
    )
    .unwrap();
    let stdout = ok(&spatial(&["run-manifest", "--manifest", s(&manifest)]));
    assert!(stdout.contains("4 rows (0 failed)"), "{stdout}");
    let results = out.join("results.csv");
    let rows = read_rows(&results).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.error.is_none()));
    // one pretrain per seed, shared across the two probe points
    assert_eq!(std::fs::read_dir(out.join("runs")).unwrap().count(), 1);

    let report = f.work.join("report");
    let md = ok(&spatial(&["report", "--results", s(&results), "--out", s(&report), "--manifest", s(&manifest)]));
    assert!(md.contains("tiny sweep"), "{md}");
    for name in ["summary.csv", "report.md", "plot.svg"] {
        assert!(report.join(name).exists(), "{name}");
    }
}
