//! End-to-end tests of the command-line surface: exit codes, file formats,
//! reproducibility.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_lookupvit")
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin()).current_dir(dir).args(args).output().expect("spawn")
}

fn tmpdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("lookupvit-cli-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

const TOY_CONFIG: &str = r#"{
  "depth": 2, "dim": 16, "heads": 2,
  "patch": [4, 4], "lookup_grid": [4, 4], "channels": 1,
  "compressed_grids": [[2, 2], [3, 3]],
  "num_classes": 3, "seed": 11
}"#;

fn prepare(dir: &Path) {
    std::fs::write(dir.join("cfg.json"), TOY_CONFIG).unwrap();
    let out = run(
        dir,
        &["gen-data", "--classes", "3", "--n", "30", "--size", "16", "--seed", "4", "--out", "data.lvds"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn train(dir: &Path, steps: &str) {
    let out = run(
        dir,
        &[
            "train", "--config", "cfg.json", "--data", "data.lvds", "--steps", steps,
            "--batch", "4", "--out", "model.lvck", "--metrics", "metrics.csv",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_command_is_usage_error() {
    let dir = tmpdir("usage");
    let out = run(&dir, &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown command"));
}

#[test]
fn unknown_flag_is_usage_error() {
    let dir = tmpdir("flag");
    let out = run(&dir, &["gen-data", "--classes", "3", "--n", "9", "--size", "8", "--out", "d", "--bogus", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus"));
}

#[test]
fn missing_flag_is_usage_error() {
    let dir = tmpdir("missing");
    let out = run(&dir, &["train", "--data", "x.lvds"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));
}

#[test]
fn malformed_config_names_the_field() {
    let dir = tmpdir("badcfg");
    prepare(&dir);
    let bad = TOY_CONFIG.replace("\"depth\"", "\"depht\"");
    std::fs::write(dir.join("bad.json"), bad).unwrap();
    let out = run(
        &dir,
        &["train", "--config", "bad.json", "--data", "data.lvds", "--out", "m.lvck"],
    );
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("depht"), "stderr should name the field: {err}");
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tmpdir("gendata");
    for name in ["a.lvds", "b.lvds"] {
        let out = run(
            &dir,
            &["gen-data", "--classes", "3", "--n", "30", "--size", "8", "--seed", "9", "--out", name],
        );
        assert!(out.status.success());
    }
    let a = std::fs::read(dir.join("a.lvds")).unwrap();
    let b = std::fs::read(dir.join("b.lvds")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn training_runs_are_byte_reproducible() {
    let dir = tmpdir("repro");
    prepare(&dir);
    train(&dir, "8");
    let metrics1 = std::fs::read(dir.join("metrics.csv")).unwrap();
    let ckpt1 = std::fs::read(dir.join("model.lvck")).unwrap();
    train(&dir, "8");
    assert_eq!(std::fs::read(dir.join("metrics.csv")).unwrap(), metrics1);
    assert_eq!(std::fs::read(dir.join("model.lvck")).unwrap(), ckpt1);
    let text = String::from_utf8(metrics1).unwrap();
    assert!(text.starts_with("step,loss,acc_p,acc_l,acc_avg,grid\n"));
    assert_eq!(text.lines().count(), 9); // header + 8 steps
}

#[test]
fn eval_rows_share_one_checkpoint_hash() {
    let dir = tmpdir("eval");
    prepare(&dir);
    train(&dir, "6");
    let out = run(
        &dir,
        &[
            "eval", "--ckpt", "model.lvck", "--data", "data.lvds",
            "--grids", "1x1,2x2,3x3,4x4", "--out", "eval.csv",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.join("eval.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "grid_h,grid_w,acc_p,acc_l,acc_avg,checkpoint_crc32");
    assert_eq!(lines.len(), 5);
    let hashes: Vec<&str> =
        lines[1..].iter().map(|l| l.rsplit(',').next().unwrap()).collect();
    assert!(hashes.windows(2).all(|w| w[0] == w[1]), "rows must share one hash: {hashes:?}");
}

#[test]
fn attnmap_exports_one_valid_pgm_per_layer() {
    let dir = tmpdir("attnmap");
    prepare(&dir);
    train(&dir, "4");
    let out = run(
        &dir,
        &["attnmap", "--ckpt", "model.lvck", "--data", "data.lvds", "--index", "1", "--out-dir", "maps"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // Row count equals depth; each map parses and has the lookup grid shape.
    for layer in 0..2 {
        let pgm = std::fs::read_to_string(dir.join(format!("maps/layer{layer:02}.pgm"))).unwrap();
        let (w, h, grays) = lookupvit::pgm::from_p2_string(&pgm).unwrap();
        assert_eq!((w, h), (4, 4));
        assert_eq!(grays.len(), 16);
        let csv = std::fs::read_to_string(dir.join(format!("maps/layer{layer:02}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 4);
    }
    assert!(!dir.join("maps/layer02.pgm").exists());
}

#[test]
fn robust_emits_severity_table() {
    let dir = tmpdir("robust");
    prepare(&dir);
    train(&dir, "4");
    let out = run(
        &dir,
        &[
            "robust", "--ckpt", "model.lvck", "--data", "data.lvds",
            "--samples", "4", "--severities", "3", "--out", "robust.csv",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.join("robust.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "severity,sigma,mean_deviation,samples");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("1,0.05,"));
    assert!(lines[3].starts_with("3,0.15,"));
}

#[test]
fn flops_preset_reproduces_comparison_table() {
    let dir = tmpdir("flops");
    let out = run(&dir, &["flops", "--preset", "b16-224", "--out", "flops.csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.join("flops.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "size,grid_h,grid_w,N,M,D,depth,gmacs,gflops");
    // Vanilla comparator row is encoded as grid 0x0 with M = 0.
    assert_eq!(lines[1], "224,0,0,196,0,768,12,17.3553,34.7106");
    assert_eq!(lines[2], "224,3,3,196,9,768,12,6.5548,13.1097");
    assert_eq!(lines[3], "224,5,5,196,25,768,12,8.3503,16.7005");
    assert_eq!(lines[4], "224,7,7,196,49,768,12,11.0611,22.1222");
    assert_eq!(lines[5], "224,10,10,196,100,768,12,16.8921,33.7842");
}

#[test]
fn flops_rejects_oversized_m() {
    let dir = tmpdir("flopsbad");
    let out = run(&dir, &["flops", "--dims", "16,32,8,1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("must not exceed"));
}

#[test]
fn flops_empirical_matches_analytic() {
    let dir = tmpdir("flopsemp");
    std::fs::write(dir.join("cfg.json"), TOY_CONFIG).unwrap();
    let out = run(
        &dir,
        &["flops", "--empirical", "--config", "cfg.json", "--grid", "2x2", "--out", "emp.csv"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.join("emp.csv")).unwrap();
    for line in text.lines().skip(1) {
        assert!(line.ends_with(",true"), "per-block mismatch: {line}");
    }
}
