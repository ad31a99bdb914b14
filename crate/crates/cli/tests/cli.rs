//! End-to-end tests driving the compiled binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use loopflow_core::data::{load_loops, save_loops, Split};
use loopflow_core::geometry::distance_matrix;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_loopflow")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn loopflow")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_toy_config(dir: &Path) -> PathBuf {
    let path = dir.join("toy.toml");
    std::fs::write(
        &path,
        "[model]\n\
         n_max = 8\n\
         dist_layers = 3\n\
         amino_layers = 4\n\
         conv_channels = 8\n\
         wgnn_dim = 16\n\
         mlp_hidden = [24, 16]\n\
         \n\
         [train]\n\
         epochs = 2\n\
         batch_size = 8\n\
         mc_samples = 8\n\
         alternation = 1\n\
         learning_rate = 0.003\n",
    )
    .unwrap();
    path
}

fn synth_dataset(dir: &Path, count: usize, seed: u64) -> PathBuf {
    let path = dir.join(format!("ds-{seed}.tsv"));
    run_ok(&[
        "synth",
        "--class",
        "H3",
        "--count",
        &count.to_string(),
        "--min-len",
        "5",
        "--max-len",
        "8",
        "--seed",
        &seed.to_string(),
        "--out",
        path.to_str().unwrap(),
    ]);
    path
}

#[test]
fn train_smoke_writes_checkpoint_and_log_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_toy_config(dir.path());
    let ds = synth_dataset(dir.path(), 8, 3);
    let ckpt = dir.path().join("model.ckpt");
    run_ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--dataset",
        ds.to_str().unwrap(),
        "--seed",
        "7",
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert!(ckpt.exists());
    let log = ckpt.with_extension("log.jsonl");
    let lines: Vec<String> =
        std::fs::read_to_string(&log).unwrap().lines().map(String::from).collect();
    assert_eq!(lines.len(), 2, "expected one log record per epoch");
    assert!(ckpt.with_file_name("model.ckpt.manifest.json").exists());

    // Identical invocation produces identical checkpoint bytes.
    let ckpt2 = dir.path().join("model2.ckpt");
    run_ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--dataset",
        ds.to_str().unwrap(),
        "--seed",
        "7",
        "--out",
        ckpt2.to_str().unwrap(),
    ]);
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(&ckpt2).unwrap());
}

#[test]
fn train_missing_dataset_exits_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_toy_config(dir.path());
    let missing = dir.path().join("nope.tsv");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--dataset",
        missing.to_str().unwrap(),
        "--out",
        dir.path().join("m.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("nope.tsv"), "{stderr}");
}

#[test]
fn generate_is_counted_and_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_toy_config(dir.path());
    let ds = synth_dataset(dir.path(), 8, 5);
    let ckpt = dir.path().join("model.ckpt");
    run_ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--dataset",
        ds.to_str().unwrap(),
        "--seed",
        "1",
        "--out",
        ckpt.to_str().unwrap(),
    ]);

    let out1 = dir.path().join("g1.tsv");
    let out2 = dir.path().join("g2.tsv");
    for out in [&out1, &out2] {
        run_ok(&[
            "generate",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--count",
            "10",
            "--seed",
            "9",
            "--out",
            out.to_str().unwrap(),
        ]);
    }
    let loops = load_loops(&out1).unwrap();
    assert_eq!(loops.len(), 10);
    assert!(loops.iter().all(|l| l.distances.is_some()));
    assert_eq!(std::fs::read(&out1).unwrap(), std::fs::read(&out2).unwrap());

    // A corrupt checkpoint is a data failure.
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"garbage").unwrap();
    let out = run(&[
        "generate",
        "--checkpoint",
        bad.to_str().unwrap(),
        "--count",
        "1",
        "--out",
        dir.path().join("x.tsv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn evaluate_rigid_copies_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let ds_path = synth_dataset(dir.path(), 20, 11);
    let ds = loopflow_core::data::load_dataset(&ds_path).unwrap();

    // Generated set: rigid copies of every test loop.
    let rot = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
    let copies: Vec<_> = ds
        .split(Split::Test)
        .into_iter()
        .map(|l| {
            let mut c = l.clone();
            c.id = format!("copy-{}", l.id);
            c.coords = Some(l.coords.as_ref().unwrap().transformed(&rot, &[4.0, -2.0, 9.0]));
            c
        })
        .collect();
    assert!(!copies.is_empty());
    let gen_path = dir.path().join("copies.tsv");
    save_loops(&copies, &gen_path).unwrap();

    let report_path = dir.path().join("report.json");
    let out = run_ok(&[
        "evaluate",
        "--generated",
        gen_path.to_str().unwrap(),
        "--dataset",
        ds_path.to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("validity     1.0000"), "{stdout}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!(report["rmsd"]["mean"].as_f64().unwrap() < 1e-9);
    assert_eq!(report["validity_rate"].as_f64().unwrap(), 1.0);
    assert_eq!(report["rmsd"]["unmatched"].as_u64().unwrap(), 0);

    // Re-running is byte-identical.
    let report_path2 = dir.path().join("report2.json");
    run_ok(&[
        "evaluate",
        "--generated",
        gen_path.to_str().unwrap(),
        "--dataset",
        ds_path.to_str().unwrap(),
        "--out",
        report_path2.to_str().unwrap(),
    ]);
    assert_eq!(std::fs::read(&report_path).unwrap(), std::fs::read(&report_path2).unwrap());
}

#[test]
fn interpolate_single_step_returns_roundtripped_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_toy_config(dir.path());
    let ds_path = synth_dataset(dir.path(), 10, 21);
    let ckpt = dir.path().join("model.ckpt");
    run_ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--dataset",
        ds_path.to_str().unwrap(),
        "--seed",
        "2",
        "--out",
        ckpt.to_str().unwrap(),
    ]);

    let out_path = dir.path().join("interp.tsv");
    run_ok(&[
        "interpolate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--dataset",
        ds_path.to_str().unwrap(),
        "--a",
        "h3-0",
        "--b",
        "h3-1",
        "--steps",
        "1",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    let points = load_loops(&out_path).unwrap();
    assert_eq!(points.len(), 2);

    let ds = loopflow_core::data::load_dataset(&ds_path).unwrap();
    let a = ds.loops.iter().find(|l| l.id == "h3-0").unwrap();
    let b = ds.loops.iter().find(|l| l.id == "h3-1").unwrap();
    for (end, source) in points.iter().zip([a, b]) {
        assert_eq!(end.sequence, source.sequence, "endpoint sequence must round-trip");
        let got = end.distances.as_ref().unwrap();
        let want = distance_matrix(source.coords.as_ref().unwrap());
        for i in 0..want.n() {
            for j in 0..want.n() {
                assert!(
                    (got.get(i, j) - want.get(i, j)).abs() < 1e-6,
                    "({i},{j}): {} vs {}",
                    got.get(i, j),
                    want.get(i, j)
                );
            }
        }
    }
}

#[test]
fn sweep_grid_runs_every_cell_and_matches_single_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_toy_config(dir.path());
    let ds_path = synth_dataset(dir.path(), 12, 31);
    let ckpt = dir.path().join("model.ckpt");
    run_ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--dataset",
        ds_path.to_str().unwrap(),
        "--seed",
        "3",
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    let gen_path = dir.path().join("gen.tsv");
    run_ok(&[
        "generate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--count",
        "6",
        "--seed",
        "4",
        "--out",
        gen_path.to_str().unwrap(),
    ]);

    // 2 x 2 grid -> 4 rows.
    let table = dir.path().join("sweep.jsonl");
    run_ok(&[
        "sweep",
        "--generated",
        gen_path.to_str().unwrap(),
        "--dataset",
        ds_path.to_str().unwrap(),
        "--grid",
        "lambda1=25,50;lambda2=75,100",
        "--seed",
        "6",
        "--out",
        table.to_str().unwrap(),
    ]);
    let rows: Vec<serde_json::Value> = std::fs::read_to_string(&table)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.get("report").is_some()));

    // A single-cell sweep reproduces a plain evaluate run cell-for-cell.
    let table1 = dir.path().join("sweep1.jsonl");
    run_ok(&[
        "sweep",
        "--generated",
        gen_path.to_str().unwrap(),
        "--dataset",
        ds_path.to_str().unwrap(),
        "--grid",
        "lambda1=50",
        "--seed",
        "6",
        "--out",
        table1.to_str().unwrap(),
    ]);
    let row: serde_json::Value =
        serde_json::from_str(std::fs::read_to_string(&table1).unwrap().lines().next().unwrap())
            .unwrap();
    let report_path = dir.path().join("report.json");
    run_ok(&[
        "evaluate",
        "--generated",
        gen_path.to_str().unwrap(),
        "--dataset",
        ds_path.to_str().unwrap(),
        "--seed",
        "6",
        "--out",
        report_path.to_str().unwrap(),
    ]);
    let single: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(row["report"], single);
}

#[test]
fn evaluate_class_mismatch_fails() {
    let dir = tempfile::tempdir().unwrap();
    let h3 = synth_dataset(dir.path(), 10, 41);
    // An H2-class generated file (sequence-only loops are enough).
    let h2_path = dir.path().join("h2.tsv");
    run_ok(&[
        "synth", "--class", "H2", "--count", "4", "--min-len", "4", "--max-len", "5",
        "--seed", "42", "--out", h2_path.to_str().unwrap(),
    ]);
    let h2_loops = load_loops(&h2_path).unwrap();
    let gen_path = dir.path().join("h2-gen.tsv");
    save_loops(&h2_loops, &gen_path).unwrap();
    let out = run(&[
        "evaluate",
        "--generated",
        gen_path.to_str().unwrap(),
        "--dataset",
        h3.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("class mismatch"));
}
