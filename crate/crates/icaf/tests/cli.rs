//! Black-box tests of the `icaf` binary: exit codes, determinism of
//! dataset generation, config resolution, and a miniature train → eval →
//! viz round trip through real processes.

use std::path::Path;
use std::process::{Command, Output};

fn icaf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icaf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_tiny_config(path: &Path) {
    std::fs::write(
        path,
        "\
# miniature configuration for process-level tests
train.o = 2
train.p = 1
train.q = 1
train.epochs = 1
train.labeled_per_batch = 1
train.unlabeled_per_batch = 1
train.crop_size = 32
train.checkpoint_every = 0
aug.crop_size = [32,32]
segnet.widths = [4,6,8,10]
segnet.dec_width = 6
pcn.wgu_widths = [4,6,8]
label_ratio = 0.25
",
    )
    .unwrap();
}

#[test]
fn usage_errors_exit_2_and_runtime_errors_exit_1() {
    let out = icaf(&["gen-data"]);
    assert_eq!(out.status.code(), Some(2), "missing --out is a usage error");
    let out = icaf(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
    let out = icaf(&["train", "--data", "/definitely/not/a/dataset"]);
    assert_eq!(out.status.code(), Some(1), "runtime failures exit 1");
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn gen_data_prints_a_reproducible_digest() {
    let tmp = tempfile::tempdir().unwrap();
    let d1 = tmp.path().join("d1");
    let d2 = tmp.path().join("d2");
    let args = |out: &Path| {
        vec![
            "gen-data".to_string(),
            "--out".into(),
            out.display().to_string(),
            "--groups".into(),
            "2".into(),
            "--views".into(),
            "4".into(),
            "--size".into(),
            "32".into(),
            "--seed".into(),
            "7".into(),
        ]
    };
    let o1 = icaf(&args(&d1).iter().map(String::as_str).collect::<Vec<_>>());
    assert!(o1.status.success());
    let o2 = icaf(&args(&d2).iter().map(String::as_str).collect::<Vec<_>>());
    assert!(o2.status.success());
    let digest = |o: &Output| {
        stdout(o)
            .lines()
            .find_map(|l| l.strip_prefix("dataset digest: ").map(String::from))
            .expect("digest line")
    };
    assert_eq!(digest(&o1), digest(&o2), "same args, same dataset");
    assert!(d1.join("manifest.json").exists());
}

#[test]
fn dump_config_shows_resolved_defaults_and_presets() {
    let out = icaf(&["train", "--dump-config"]);
    assert!(out.status.success());
    let dump = stdout(&out);
    for line in ["loss.tau = 0.95", "loss.lambda = 0.5", "train.o = 6", "train.p = 3"] {
        assert!(dump.lines().any(|l| l == line), "missing {line}");
    }
    let out = icaf(&["train", "--dump-config", "--preset", "supervised-only"]);
    let dump = stdout(&out);
    assert!(dump.lines().any(|l| l == "loss.lambda = 0.0"));
    assert!(dump.lines().any(|l| l == "preset = \"supervised-only\""));
}

#[test]
fn train_eval_viz_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let test_data = tmp.path().join("test");
    let cfg = tmp.path().join("tiny.cfg");
    write_tiny_config(&cfg);
    for (dir, seed) in [(&data, "7"), (&test_data, "8")] {
        let out = icaf(&[
            "gen-data", "--out", &dir.display().to_string(), "--groups", "4", "--views", "4",
            "--size", "32", "--seed", seed,
        ]);
        assert!(out.status.success());
    }

    let run = tmp.path().join("run");
    let out = icaf(&[
        "train",
        "--data",
        &data.display().to_string(),
        "--test-data",
        &test_data.display().to_string(),
        "--out",
        &run.display().to_string(),
        "--config",
        &cfg.display().to_string(),
    ]);
    assert!(
        out.status.success(),
        "train failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    for artifact in ["config.txt", "version.json", "metrics.jsonl", "final.ckpt", "report.json"] {
        assert!(run.join(artifact).exists(), "missing run artifact {artifact}");
    }
    let version: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("version.json")).unwrap()).unwrap();
    assert!(version["config_digest"].as_str().unwrap().len() == 64);

    // Evaluating the run twice yields byte-identical reports.
    let eval_args = ["eval", "--run", &run.display().to_string(), "--data", &test_data.display().to_string()];
    let e1 = icaf(&eval_args);
    assert!(e1.status.success(), "{}", String::from_utf8_lossy(&e1.stderr));
    let e2 = icaf(&eval_args);
    assert_eq!(stdout(&e1), stdout(&e2));
    let report: serde_json::Value = serde_json::from_str(&stdout(&e1)).unwrap();
    assert_eq!(report["n_views"], 16, "4 test groups x 4 views");

    // Panels export and re-export identically.
    let panels = tmp.path().join("panels");
    let viz_args = [
        "viz",
        "--run",
        &run.display().to_string(),
        "--data",
        &data.display().to_string(),
        "--out",
        &panels.display().to_string(),
        "--seed",
        "3",
    ];
    let v1 = icaf(&viz_args);
    assert!(v1.status.success(), "{}", String::from_utf8_lossy(&v1.stderr));
    assert!(panels.join("boundary_view.png").exists());
    let bytes = std::fs::read(panels.join("pseudo_vam_vcm.png")).unwrap();
    let v2 = icaf(&viz_args);
    assert!(v2.status.success());
    assert_eq!(std::fs::read(panels.join("pseudo_vam_vcm.png")).unwrap(), bytes);
}

#[test]
fn ablate_writes_every_grid_row() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let test_data = tmp.path().join("test");
    let cfg = tmp.path().join("tiny.cfg");
    write_tiny_config(&cfg);
    for (dir, seed) in [(&data, "7"), (&test_data, "8")] {
        let out = icaf(&[
            "gen-data", "--out", &dir.display().to_string(), "--groups", "4", "--views", "4",
            "--size", "32", "--seed", seed,
        ]);
        assert!(out.status.success());
    }
    let sweep = tmp.path().join("sweep");
    let out = icaf(&[
        "ablate",
        "--data",
        &data.display().to_string(),
        "--test-data",
        &test_data.display().to_string(),
        "--out",
        &sweep.display().to_string(),
        "--config",
        &cfg.display().to_string(),
        "--seeds",
        "2",
        "--grid",
        "toggles",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(sweep.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], icaf::cli::ABLATION_HEADER);
    assert_eq!(lines.len(), 1 + 6 * 2, "6 toggle rows x 2 seeds");
    let rows: Vec<icaf::cli::AblationRow> = lines[1..]
        .iter()
        .map(|l| icaf::cli::AblationRow::from_csv(l).unwrap())
        .collect();
    // Every cell appears once per seed, with distinct seeds.
    for label in ["supervised", "semi-baseline", "group-baseline", "vam", "vam-vcm", "full"] {
        let seeds: Vec<u64> = rows.iter().filter(|r| r.config == label).map(|r| r.seed).collect();
        assert_eq!(seeds.len(), 2, "{label}");
        assert_ne!(seeds[0], seeds[1]);
    }
    for row in &rows {
        assert!(row.miou.is_finite() && (0.0..=1.0).contains(&row.miou));
        let run_dir = sweep.join(format!("{}-s{}", row.config, row.seed));
        assert!(run_dir.join("report.json").exists());
    }
}
