use std::fs;
use std::path::Path;
use std::process::Command;

use latentkf_cli::config::Variant;
use latentkf_cli::report::{load_metrics, read_metrics, write_metrics, MetricRecord, COLUMNS};

const BIN: &str = env!("CARGO_BIN_EXE_latentkf");

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn golden_rows() -> Vec<MetricRecord> {
    let row = |variant, noise_level, mse_db, seed| MetricRecord {
        variant,
        noise_level,
        mse_db,
        std_db: 1.25,
        latency_us_per_step: 250.5,
        param_count: 26471,
        op_count: 329284,
        seed,
        config_hash: "0123456789abcdef".into(),
    };
    vec![
        row(Variant::Encoder, 2.0, -4.805, 0),
        row(Variant::EncoderPriorEkf, 2.0, -8.43, 0),
        row(Variant::LatentKalmanNet, 3.0, f64::NAN, 1),
    ]
}

#[test]
fn metrics_file_matches_golden() {
    let mut buf = Vec::new();
    write_metrics(&mut buf, &golden_rows()).unwrap();
    let want = fs::read_to_string(fixture("metrics_golden.csv")).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), want);
    let back = read_metrics(want.as_bytes()).unwrap();
    assert_eq!(back.len(), 3);
    assert_eq!(back[1], golden_rows()[1]);
    assert!(back[2].mse_db.is_nan());
}

#[test]
fn golden_header_lists_the_columns_in_order() {
    let text = fs::read_to_string(fixture("metrics_golden.csv")).unwrap();
    let header = text.lines().nth(1).unwrap();
    assert_eq!(header, COLUMNS.join(","));
}

#[test]
fn plot_subcommand_writes_svg() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(BIN)
        .args(["plot", fixture("metrics_golden.csv").to_str().unwrap(), "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let svg = fs::read_to_string(dir.path().join("metrics_golden.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert_eq!(svg.matches("class=\"xtick\"").count(), 2);
}

#[test]
fn conflicting_mismatch_flags_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(BIN)
        .args(["mismatch", "--model", "lorenz", "--taylor-j", "2", "--decimate", "5", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("mutually exclusive"));
}

#[test]
fn unknown_variant_is_a_usage_error() {
    let out = Command::new(BIN).args(["evaluate", "--variant", "kalman"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn single_cell_evaluate_writes_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(BIN)
        .args([
            "evaluate",
            "--model",
            "pendulum",
            "--noise-level",
            "23",
            "--variant",
            "encoder",
            "--encoder-epochs",
            "1",
            "--t-train",
            "10",
            "--t-test",
            "12",
            "--seed",
            "3",
            "--out",
        ])
        .arg(dir.path())
        .env("LATENTKF_CACHE", dir.path().join("cache"))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = load_metrics(&dir.path().join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    let r = &rows[0];
    assert_eq!((r.variant, r.noise_level, r.seed), (Variant::Encoder, 23.0, 3));
    assert!(r.mse_db.is_finite() && r.latency_us_per_step > 0.0 && r.param_count > 0);
    assert_eq!(r.config_hash.len(), 16);
    assert!(dir.path().join("cache").read_dir().unwrap().next().is_some());
    assert!(dir.path().join("metrics.svg").exists());
}
