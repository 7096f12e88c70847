use std::path::{Path, PathBuf};
use std::process::Command;

use bmr_cli::commands::*;
use bmr_cli::run_config::RunConfig;
use bmr_core::RunReport;

fn shipped(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// The shipped tiny config writing into `out`.
fn tiny(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::load(&shipped("tiny.toml")).unwrap();
    cfg.run.out = out.to_path_buf();
    cfg
}

fn csv_rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(str::to_string)
        .collect()
}

#[test]
fn shipped_configs_parse() {
    for name in ["tiny.toml", "desk.toml", "full.toml"] {
        RunConfig::load(&shipped(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    let full = RunConfig::load(&shipped("full.toml")).unwrap();
    assert_eq!(full.model.max_len, 197);
    assert_eq!((full.run.batch, full.run.lr0), (24, 1e-4));
    load_synth_spec(&shipped("synth-tiny.toml")).unwrap();
}

#[test]
fn tiny_train_writes_a_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let summary = train_cmd(&tiny(dir.path())).unwrap();
    assert_eq!(summary.lines().count(), 1);
    for f in [REPORT, CHECKPOINT, VOCAB, INGEST] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let report: RunReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join(REPORT)).unwrap()).unwrap();
    assert_eq!(report.epochs.len(), 10);

    let model = load_checkpoint(&dir.path().join(CHECKPOINT)).unwrap();
    assert_eq!(model.cfg().threshold, Some(report.threshold));

    // Evaluating the saved best model on the test split reproduces the
    // reported best metrics.
    let out = dir.path().join("m.json");
    eval_cmd(
        &dir.path().join(CHECKPOINT),
        &shipped("data/tiny/test.jsonl"),
        None,
        Some(&out),
    )
    .unwrap();
    let eval: EvalReport = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(eval.metrics, report.best);
    assert_eq!(eval.threshold, report.threshold);

    eval_cmd(
        &dir.path().join(CHECKPOINT),
        &shipped("data/tiny/test.jsonl"),
        Some(1.0),
        Some(&out),
    )
    .unwrap();
    let eval: EvalReport = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(eval.threshold, 1.0);
    assert!(eval_cmd(
        &dir.path().join(CHECKPOINT),
        &shipped("data/tiny/test.jsonl"),
        Some(1.5),
        None
    )
    .is_err());
}

#[test]
fn exports_have_the_documented_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    train_cmd(&cfg).unwrap();
    let ckpt = dir.path().join(CHECKPOINT);
    let views = cfg.model.views.len();

    export_cmd(&ckpt, ExportKind::Curves, None, None).unwrap();
    assert_eq!(
        csv_rows(&dir.path().join("reweigh_curves.csv")).len(),
        CURVE_RESOLUTION * views
    );

    assert!(export_cmd(&ckpt, ExportKind::Histogram, None, None).is_err());
    export_cmd(
        &ckpt,
        ExportKind::Histogram,
        Some(&shipped("data/tiny/test.jsonl")),
        None,
    )
    .unwrap();
    assert_eq!(csv_rows(&dir.path().join("score_histogram.csv")).len(), 2 * (1 + views));

    let other = dir.path().join("elsewhere");
    export_cmd(
        &ckpt,
        ExportKind::Heatmap,
        Some(&shipped("data/tiny/train.jsonl")),
        Some(&other),
    )
    .unwrap();
    assert_eq!(
        csv_rows(&other.join("cosine_heatmap.csv")).len(),
        (1 + views) * 2 * HEATMAP_PER_CLASS
    );
}

#[test]
fn preset_ablation_has_eight_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.run.epochs = 1;
    let one = ablate_cmd(&cfg, &AblationGrid::Preset, 1).unwrap();
    assert!(one.starts_with("8 rows"), "{one}");
    let csv = std::fs::read(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv_rows(&dir.path().join("ablation.csv")).len(), 8);

    ablate_cmd(&cfg, &AblationGrid::Preset, 3).unwrap();
    assert_eq!(std::fs::read(dir.path().join("ablation.csv")).unwrap(), csv);
}

#[test]
fn grid_files_define_rows() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.toml");
    std::fs::write(
        &grid,
        "[[row]]\nlabel = \"text only\"\nviews = [\"T\"]\n\n[[row]]\nlabel = \"no coarse\"\ncoarse_loss = false\n",
    )
    .unwrap();
    let mut cfg = tiny(dir.path());
    cfg.run.epochs = 1;
    cfg.run.seeds = vec![0, 1];
    ablate_cmd(&cfg, &AblationGrid::parse(grid.to_str().unwrap()), 2).unwrap();
    let rows = csv_rows(&dir.path().join("ablation.csv"));
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("\"text only\"") && rows[0].ends_with(",2"));

    std::fs::write(&grid, "[[row]]\nlabel = \"x\"\nwidth = 3\n").unwrap();
    assert!(AblationGrid::File(grid).rows().is_err());
}

#[test]
fn seeded_commands_are_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train_cmd(&tiny(a.path())).unwrap();
    train_cmd(&tiny(b.path())).unwrap();
    for f in [REPORT, CHECKPOINT, VOCAB] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let spec = load_synth_spec(&shipped("synth-tiny.toml")).unwrap();
    synth_cmd(&spec, 3, &a.path().join("s")).unwrap();
    synth_cmd(&spec, 3, &b.path().join("s")).unwrap();
    for f in ["train.jsonl", "test.jsonl"] {
        assert_eq!(
            std::fs::read(a.path().join("s").join(f)).unwrap(),
            std::fs::read(b.path().join("s").join(f)).unwrap()
        );
    }
}

#[test]
fn shipped_tiny_data_matches_its_spec() {
    let dir = tempfile::tempdir().unwrap();
    let spec = load_synth_spec(&shipped("synth-tiny.toml")).unwrap();
    synth_cmd(&spec, 0, dir.path()).unwrap();
    for f in ["train.jsonl", "test.jsonl", "vocab.json"] {
        assert_eq!(
            std::fs::read(dir.path().join(f)).unwrap(),
            std::fs::read(shipped("data/tiny").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn missing_data_paths_are_listed_together() {
    let cfg = RunConfig::parse("", Path::new("")).unwrap();
    let err = train_cmd(&cfg).unwrap_err().to_string();
    assert!(err.contains("`train`") && err.contains("`test`"), "{err}");
}

fn bmr(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_bmr"))
        .args(args)
        .env("BMR_NUM_THREADS", "1")
        .output()
        .unwrap()
}

#[test]
fn binary_prints_one_line_and_fails_loudly() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = shipped("tiny.toml");
    let ok = bmr(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out,
        "--seed",
        "3",
        "--views",
        "IP,T",
    ]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    assert_eq!(String::from_utf8(ok.stdout).unwrap().lines().count(), 1);
    let report: RunReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join(REPORT)).unwrap()).unwrap();
    assert_eq!(report.options.seed, 3);
    assert_eq!(report.config.views.len(), 2);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "d = \"wide\"\nbatch = 1\nalpha = -1.0\nnope = true\n").unwrap();
    let fail = bmr(&["train", "--config", bad.to_str().unwrap()]);
    assert!(!fail.status.success());
    let err = String::from_utf8(fail.stderr).unwrap();
    for field in ["`d`", "batch", "alpha", "`nope`"] {
        assert!(err.contains(field), "{field} missing from {err}");
    }

    let fail = bmr(&["train", "--config", cfg.to_str().unwrap(), "--views", "IP,X"]);
    assert!(!fail.status.success());
    let fail = bmr(&[
        "eval",
        "--checkpoint",
        "/nonexistent/checkpoint.bmr",
        "--data",
        "x.jsonl",
    ]);
    assert!(!fail.status.success());
}

#[test]
fn thread_override_is_validated() {
    let run = |v: &str| {
        Command::new(env!("CARGO_BIN_EXE_bmr"))
            .args([
                "ablate",
                "--config",
                shipped("tiny.toml").to_str().unwrap(),
                "--out",
                "/nonexistent/never",
            ])
            .env("BMR_NUM_THREADS", v)
            .output()
            .unwrap()
    };
    let out = run("zero");
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("BMR_NUM_THREADS"));
}
