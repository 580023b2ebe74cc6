use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use evloc::channel::Scene;
use evloc::experiment::mean_std;
use evloc::io::{decode_capture_header, read_features, read_results};

fn evloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evloc")).args(args).output().expect("spawn evloc")
}

fn ok(args: &[&str]) -> String {
    let out = evloc(args);
    assert!(
        out.status.success(),
        "evloc {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, train: usize, test: usize, extra: &[&str]) {
    let (tr, te) = (train.to_string(), test.to_string());
    let mut args = vec!["gen", "--out", s(dir), "--train-per-label", &tr, "--test-per-label", &te];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn gen_writes_one_packet_per_label() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), 1, 1, &["--seed", "3"]);
    for name in ["train.evsc", "test.evsc"] {
        let bytes = fs::read(dir.path().join(name)).unwrap();
        let h = decode_capture_header(&bytes).unwrap();
        assert_eq!(h.count, 26);
        assert_eq!((h.k, h.n_ltf, h.n_df), (52, 2, 50));
        assert!(h.has_meta);
    }
}

#[test]
fn noise_free_extract_has_vanishing_evs() {
    let dir = tempfile::tempdir().unwrap();
    let scene = Scene { static_error_db: None, ..Scene::default() };
    let scene_path = dir.path().join("scene.toml");
    fs::write(&scene_path, scene.to_toml()).unwrap();
    gen(dir.path(), 3, 1, &["--scene", s(&scene_path), "--snr-db", "inf", "--cfo-hz", "3100"]);

    let feats = dir.path().join("evs.csv");
    let cap = dir.path().join("train.evsc");
    ok(&["extract", "--in", s(&cap), "--kind", "evs-amp", "--out", s(&feats)]);
    let fv = read_features(&feats).unwrap();
    assert_eq!(fv.len(), 78);
    // Samples are stored as f32, so the residual sits at f32 rounding level.
    let worst = fv.iter().flat_map(|f| f.values.iter().copied()).fold(0.0, f64::max);
    assert!(worst <= 1e-6, "largest EVS amplitude {worst:e}");
}

#[test]
fn sweep_rows_match_per_run_log() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), 8, 3, &[]);
    let results = dir.path().join("sweep.csv");
    let out = ok(&[
        "sweep-gamma", "--in", s(dir.path()), "--results", s(&results), "--runs", "5",
        "--kinds", "evs-amp,evs-phase", "--gammas", "0,2,4", "--order", "4", "--epochs", "3",
        "--hidden", "16,8",
    ]);
    assert!(out.contains("results:"));

    let rows = read_results(&results).unwrap();
    assert_eq!(rows.len(), 6);
    let log = fs::read_to_string(dir.path().join("sweep.csv.runs.csv")).unwrap();
    let runs: Vec<Vec<&str>> = log.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(runs.len(), 30);
    for row in &rows {
        assert_eq!(row.experiment, "sweep-gamma");
        let acc: Vec<f64> = runs
            .iter()
            .filter(|r| r[1] == row.kind.as_str() && r[2] == row.gamma.to_string())
            .map(|r| r[5].parse().unwrap())
            .collect();
        assert_eq!(acc.len(), 5);
        let (m, sd) = mean_std(&acc);
        assert!((m - row.accuracy).abs() < 2e-6, "{row:?} vs mean {m}");
        assert!((sd - row.std).abs() < 2e-6, "{row:?} vs std {sd}");
    }
}

#[test]
fn missing_flags_are_usage_errors() {
    for args in [&["gen"][..], &["extract", "--in", "x.evsc"], &["compare", "--in", "d"], &[]] {
        let out = evloc(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    }
}

#[test]
fn malformed_files_report_byte_offsets() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.evsc");
    fs::write(&bad, b"EVSX\x01\x00").unwrap();
    let out = evloc(&["extract", "--in", s(&bad), "--kind", "csi-amp", "--out", s(&dir.path().join("f.csv"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("byte offset 0"), "{err}");

    gen(dir.path(), 1, 1, &[]);
    let cap = dir.path().join("train.evsc");
    let mut bytes = fs::read(&cap).unwrap();
    bytes.truncate(bytes.len() - 5);
    fs::write(&cap, &bytes).unwrap();
    let out = evloc(&["extract", "--in", s(&cap), "--kind", "csi-amp", "--out", s(&dir.path().join("f.csv"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte offset"));

    let feats = dir.path().join("feats.csv");
    fs::write(&feats, "label,kind,f1\n0,csi-amp,zz\n").unwrap();
    let out = evloc(&["train", "--features", s(&feats), "--model-out", s(&dir.path().join("m.json"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte offset"));
}

fn pipeline(dir: &Path) -> (Vec<u8>, Vec<u8>, String) {
    gen(dir, 6, 2, &["--seed", "9"]);
    let (tr, te) = (dir.join("train.csv"), dir.join("test.csv"));
    for (cap, f) in [("train.evsc", &tr), ("test.evsc", &te)] {
        ok(&[
            "extract", "--in", s(&dir.join(cap)), "--kind", "evs-phase", "--gamma", "2", "--order", "session",
            "--out", s(f),
        ]);
    }
    let model = dir.join("model.json");
    ok(&["train", "--features", s(&tr), "--epochs", "5", "--seed", "4", "--model-out", s(&model)]);
    let results = dir.join("results.csv");
    let report = ok(&["eval", "--model", s(&model), "--features", s(&te), "--results", s(&results)]);
    (fs::read(&results).unwrap(), fs::read(&model).unwrap(), report)
}

#[test]
fn end_to_end_is_bit_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, ma, pa) = pipeline(a.path());
    let (rb, mb, pb) = pipeline(b.path());
    assert_eq!(ra, rb);
    assert_eq!(ma, mb);
    assert_eq!(pa, pb);
    assert!(pa.contains("confusion"));
    let rows = read_results(a.path().join("results.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].experiment, "eval");
}

#[test]
fn knn_appends_to_results() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), 4, 2, &[]);
    let (tr, te) = (dir.path().join("tr.csv"), dir.path().join("te.csv"));
    for (cap, f) in [("train.evsc", &tr), ("test.evsc", &te)] {
        ok(&["extract", "--in", s(&dir.path().join(cap)), "--kind", "csi-amp", "--out", s(f)]);
    }
    let results = dir.path().join("r.csv");
    for _ in 0..2 {
        ok(&["knn", "--train", s(&tr), "--test", s(&te), "--k", "3", "--results", s(&results)]);
    }
    let rows = read_results(&results).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0], rows[1]);
    assert!(rows[0].accuracy > 0.5, "{:?}", rows[0]);
}
