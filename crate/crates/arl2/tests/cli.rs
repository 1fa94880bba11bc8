use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str], out: &Path) -> i32 {
    let status = Command::new(env!("CARGO_BIN_EXE_arl2"))
        .args(args)
        .arg("--out")
        .arg(out)
        .status()
        .expect("binary runs");
    status.code().unwrap_or(-1)
}

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, json).unwrap();
    p
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn select_layers_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture("select.json");
    assert_eq!(
        run(&["select-layers", "--config", cfg.to_str().unwrap()], dir.path()),
        0
    );
    let got = read_json(&dir.path().join("selection.json"));
    let want = read_json(&fixture("selection_golden.json"));
    assert_eq!(got["replaced"], want["replaced"]);
    assert_eq!(got["hs_dims"], want["hs_dims"]);
    assert_eq!(got["hr_dims"], want["hr_dims"]);
    let want_p = want["p"].as_array().unwrap();
    let got_p = got["p"].as_array().unwrap();
    assert_eq!(got_p.len(), want_p.len());
    for (g, w) in got_p.iter().zip(want_p) {
        let (g, w) = (g["p"].as_f64().unwrap(), w.as_f64().unwrap());
        assert!((g - w).abs() <= 1e-9 * w.abs().max(1.0), "{g} vs {w}");
    }
    // layer 4 has a zero-width dynamic cell
    assert!(got["arr"][4][3].is_null());
    let manifest = read_json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn scores_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"budget": 3}"#);
    let scores = fixture("scores.csv");
    let code = run(
        &[
            "select-layers",
            "--config",
            cfg.to_str().unwrap(),
            "--scores",
            scores.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(code, 0);
    let got = read_json(&dir.path().join("selection.json"));
    assert_eq!(got["replaced"].as_array().unwrap().len(), 3);
}

#[test]
fn generate_is_bitwise_reproducible() {
    let cfg_json = r#"{"model": {"num_layers": 2, "heads": 2, "head_dim": 4, "ff_dim": 16, "tokens_per_frame": 3},
                      "hybrid_layers": [1], "num_frames": 5, "denoise_steps": 2}"#;
    let mut dumps = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), "g.json", cfg_json);
        let out = dir.path().join("out");
        assert_eq!(
            run(&["generate", "--config", cfg.to_str().unwrap(), "--seed", "11"], &out),
            0
        );
        dumps.push(std::fs::read(out.join("frames.bin")).unwrap());
        let frames = arl2::blob::read_frames(&dumps.last().unwrap()[..]).unwrap();
        assert_eq!(frames.len(), 5);
    }
    assert_eq!(dumps[0], dumps[1]);
}

#[test]
fn cost_sweep_has_flat_hybrid_memory() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["cost"], dir.path()), 0);
    let mut rdr = csv::Reader::from_path(dir.path().join("cost.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 101);
    let header = rdr.headers().unwrap().clone();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let hb = col("hybrid_bytes");
    assert!(rows.iter().all(|r| r[hb] == rows[0][hb]));
    let sb = col("softmax_bytes");
    let s: Vec<u64> = rows.iter().map(|r| r[sb].parse().unwrap()).collect();
    assert!(s.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn bench_reports_quadratic_and_linear_curves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "b.json",
        r#"{"model": {"num_layers": 2, "heads": 2, "head_dim": 4, "ff_dim": 8, "tokens_per_frame": 2},
            "frames": [2, 4, 6, 8]}"#,
    );
    let out = dir.path().join("out");
    assert_eq!(run(&["bench", "--config", cfg.to_str().unwrap()], &out), 0);
    let mut rdr = csv::Reader::from_path(out.join("summary.csv")).unwrap();
    let header = rdr.headers().unwrap().clone();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    let find = |b: &str| rows.iter().find(|r| &r[col("backend")] == b).unwrap().clone();
    let soft = find("softmax");
    assert_eq!(&soft[col("fit_degree")], "2");
    assert_eq!(
        soft[col("memory_slope_bytes")],
        soft[col("expected_softmax_slope_bytes")]
    );
    let hyb = find("hybrid");
    assert_eq!(&hyb[col("fit_degree")], "1");
    assert_eq!(&hyb[col("memory_constant")], "true");
}

#[test]
fn distill_stage1_writes_a_loadable_layer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "d.json", r#"{"steps": 20}"#);
    let out = dir.path().join("out");
    assert_eq!(run(&["distill", "--config", cfg.to_str().unwrap()], &out), 0);
    let blob = std::fs::read(out.join("hybrid_layer0.bin")).unwrap();
    arl2::blob::read_hybrid_layer(&blob[..]).unwrap();
    let summary = read_json(&out.join("train_summary.json"));
    assert!(summary.is_object());
    let loss = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    assert!(loss.lines().count() >= 21);
}

#[test]
fn invalid_configs_fail_with_error_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "b.json", r#"{"frames": []}"#);
    let out = dir.path().join("out");
    assert_eq!(run(&["bench", "--config", cfg.to_str().unwrap()], &out), 2);
    let err = read_json(&out.join("error.json"));
    assert_eq!(err["status"], "error");
    assert_eq!(err["kind"], "config");
    assert!(!out.join("manifest.json").exists());

    let cfg = write_config(dir.path(), "u.json", r#"{"frames": [1], "unknown_key": 1}"#);
    let out = dir.path().join("out2");
    assert_eq!(run(&["bench", "--config", cfg.to_str().unwrap()], &out), 2);

    let out = dir.path().join("out3");
    assert_ne!(run(&["select-layers"], &out), 0);
    assert!(out.join("error.json").exists());
}
