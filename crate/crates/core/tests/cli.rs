use std::path::Path;
use std::process::{Command, Output};

use rcca3d::init::SeededInit;
use rcca3d::io::{read_tensor_as, read_weights, write_tensor};
use rcca3d::nonlocal::{criss_cross_mask, masked_dense_cca_oracle};
use rcca3d::{axpy, max_abs_diff, FeatureMap4D, Grid, ModuleWeights};

fn rcca3d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rcca3d")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn exit_codes() {
    assert_eq!(rcca3d(&["verify", "--only", "cost"]).status.code(), Some(0));
    assert_eq!(rcca3d(&["verify", "--only", "nonsense"]).status.code(), Some(2));
    assert_eq!(rcca3d(&["cost", "--r", "0"]).status.code(), Some(2));
    assert_eq!(rcca3d(&["cost", "--geometry", "conv9_9"]).status.code(), Some(2));
    assert_eq!(rcca3d(&["frobnicate"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.cct");
    let out = dir.path().join("out.cct");
    assert_eq!(rcca3d(&["run", "--input", p(&missing), "--output", p(&out)]).status.code(), Some(3));

    let corrupt = dir.path().join("corrupt.cct");
    std::fs::write(&corrupt, b"CCT9\x04garbage").unwrap();
    assert_eq!(rcca3d(&["run", "--input", p(&corrupt), "--output", p(&out)]).status.code(), Some(3));
}

#[test]
fn cost_reports_reference_numbers() {
    let text = stdout(&rcca3d(&["cost", "--geometry", "conv3_3", "--r", "3", "--cd", "1/4", "--variant", "a"]));
    assert!(text.contains("delta params 0.39M"), "{text}");
    assert!(text.contains("total 49.3G / 24.69M"), "{text}");

    let csv = stdout(&rcca3d(&["cost", "--geometry", "conv4_5", "--format", "csv"]));
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("label,macs,flops,params"));
    assert_eq!(lines.count(), 1);

    let nl = stdout(&rcca3d(&["cost", "--geometry", "conv3_3", "--nl"]));
    assert!(nl.contains("delta params 0.52M"), "{nl}");

    let tables = rcca3d(&["cost", "--tables"]);
    assert_eq!(tables.status.code(), Some(0));
    assert!(stdout(&tables).contains("mismatch (not gated)"));
}

#[test]
fn zero_gamma_run_returns_the_input_payload() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("x.cct");
    let y = dir.path().join("y.cct");
    assert!(rcca3d(&["random-tensor", "--dims", "4,2,3,3", "--seed", "9", "--precision", "8", "--output", p(&x)]).status.success());
    for variant in ["a", "b", "c", "d"] {
        let out = rcca3d(&["run", "--input", p(&x), "--output", p(&y), "--gamma", "0", "--variant", variant]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(std::fs::read(&x).unwrap(), std::fs::read(&y).unwrap(), "structure {variant}");
    }
}

#[test]
fn run_agrees_with_composed_dense_reference() {
    let dir = tempfile::tempdir().unwrap();
    let grid = Grid::new(2, 3, 3).unwrap();
    let x: FeatureMap4D<f32> = SeededInit::new(5).feature_map(6, grid);
    let xin = dir.path().join("x.cct");
    let wpath = dir.path().join("w.cctw");
    let y = dir.path().join("y.cct");
    write_tensor(&xin, &x).unwrap();
    assert!(rcca3d(&["init-weights", "--channels", "6", "--cd", "1/2", "--seed", "3", "--gamma", "0.7", "--output", p(&wpath)]).status.success());
    let out = rcca3d(&["run", "--input", p(&xin), "--output", p(&y), "--weights", p(&wpath), "--cd", "1/2", "--r", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let w = match read_weights::<f32>(&wpath).unwrap() {
        ModuleWeights::Full(w) => w,
        ModuleWeights::Reduced(_) => panic!("expected full weights"),
    };
    let mut reference = x.clone();
    for _ in 0..3 {
        let h = masked_dense_cca_oracle(&reference, &w, criss_cross_mask).unwrap();
        reference = axpy(w.gamma, &h, &x).unwrap();
    }
    let got: FeatureMap4D<f32> = read_tensor_as(&y).unwrap();
    assert!(max_abs_diff(&got, &reference).unwrap() <= 1e-5);
}

#[test]
fn mismatched_weights_are_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("x.cct");
    let w = dir.path().join("w.cctw");
    let y = dir.path().join("y.cct");
    assert!(rcca3d(&["random-tensor", "--dims", "8,1,2,2", "--output", p(&x)]).status.success());
    assert!(rcca3d(&["init-weights", "--channels", "8", "--variant", "c", "--output", p(&w)]).status.success());
    assert_eq!(rcca3d(&["run", "--input", p(&x), "--output", p(&y), "--weights", p(&w), "--variant", "a"]).status.code(), Some(2));
    assert!(rcca3d(&["run", "--input", p(&x), "--output", p(&y), "--weights", p(&w), "--variant", "c"]).status.success());
}

fn read_pgm(path: &Path) -> (usize, usize, Vec<u8>) {
    let bytes = std::fs::read(path).unwrap();
    let header_end = bytes.iter().enumerate().filter(|(_, &b)| b == b'\n').nth(2).unwrap().0 + 1;
    let header = std::str::from_utf8(&bytes[..header_end]).unwrap();
    let mut parts = header.split_whitespace();
    assert_eq!(parts.next(), Some("P5"));
    let w: usize = parts.next().unwrap().parse().unwrap();
    let h: usize = parts.next().unwrap().parse().unwrap();
    assert_eq!(parts.next(), Some("255"));
    (w, h, bytes[header_end..].to_vec())
}

#[test]
fn influence_maps_show_star_then_full_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = rcca3d(&["influence", "--dims", "4,3,8,8", "--source", "1,4,4", "--out-dir", p(dir.path())]);
    assert!(out.status.success());
    for t in 0..3 {
        let (w, h, one) = read_pgm(&dir.path().join(format!("influence_r1_t{t}.pgm")));
        assert_eq!((w, h), (8, 8));
        for hh in 0..8 {
            for ww in 0..8 {
                let on_star = if t == 1 { hh == 4 || ww == 4 } else { hh == 4 && ww == 4 };
                assert_eq!(one[hh * 8 + ww] != 0, on_star, "R=1 t={t} ({hh},{ww})");
            }
        }
        let (_, _, three) = read_pgm(&dir.path().join(format!("influence_r3_t{t}.pgm")));
        assert!(three.iter().all(|&v| v != 0));
    }
}

#[test]
fn influence_with_unit_spatial_extent_covers_all_frames() {
    let dir = tempfile::tempdir().unwrap();
    let out = rcca3d(&["influence", "--dims", "2,4,1,1", "--source", "2,0,0", "--r", "1", "--out-dir", p(dir.path())]);
    assert!(out.status.success());
    for t in 0..4 {
        let (w, h, px) = read_pgm(&dir.path().join(format!("influence_r1_t{t}.pgm")));
        assert_eq!((w, h), (1, 1));
        assert_ne!(px[0], 0);
    }
    assert!(stdout(&out).contains("R=1: 4/4"));
}

#[test]
fn influence_rejects_source_outside_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = rcca3d(&["influence", "--dims", "2,2,2,2", "--source", "5,0,0", "--out-dir", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_prints_medians_ratio_and_stable_checksums() {
    let args = ["bench", "--dims", "8,2,6,6", "--k", "1", "--seed", "4", "--threads", "1"];
    let a = stdout(&rcca3d(&args));
    let b = stdout(&rcca3d(&args));
    assert!(a.contains("speedup (non-local / rcca)"));
    let checksums = |s: &str| s.lines().find(|l| l.starts_with("checksums")).unwrap().to_string();
    assert_eq!(checksums(&a), checksums(&b));
}
