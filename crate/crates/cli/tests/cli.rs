use std::path::Path;
use std::process::{Command, Output};
use tape_core::degrade::write_ppm;
use tape_core::Tensor;

fn tape(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tape"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

const SMALL: &str = r#"{
  "seed": 3,
  "model": {"channels": 8, "patch_size": 4, "heads": 2},
  "pretrain_iters": 3,
  "finetune_iters": 2,
  "eval_images": 2,
  "finetune_task": "snow",
  "log_wall_time": false
}"#;

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = tape(dir.path(), &["gradcheck", "--seed", "3"]);
    assert!(o.status.success(), "{}", text(&o));
    let out = text(&o);
    assert!(out.contains("matmul") && out.contains("max rel err"), "{out}");
}

#[test]
fn pretrain_finetune_eval_restore() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("small.json"), SMALL).unwrap();

    let o = tape(d, &["pretrain", "--config", "small.json", "--out", "pre.ckpt"]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(d.join("pre.ckpt").exists());
    assert!(d.join("pre.ckpt.config.json").exists());
    let log = std::fs::read_to_string(d.join("pre.ckpt.log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);

    let o = tape(d, &["finetune", "--config", "small.json", "--ckpt", "pre.ckpt", "--out", "ft.ckpt"]);
    assert!(o.status.success(), "{}", text(&o));

    let o = tape(d, &["eval", "--config", "small.json", "--ckpt", "ft.ckpt", "--out", "eval.csv"]);
    assert!(o.status.success(), "{}", text(&o));
    let csv = std::fs::read_to_string(d.join("eval.csv")).unwrap();
    assert!(csv.lines().count() >= 3, "{csv}");

    write_ppm(d.join("in.ppm"), &Tensor::full(&[3, 16, 16], 0.5)).unwrap();
    let o = tape(d, &["restore", "--ckpt", "ft.ckpt", "--input", "in.ppm", "--output", "out.ppm"]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(d.join("out.ppm").exists());

    // 17x17 does not split into 4x4 patches
    write_ppm(d.join("odd.ppm"), &Tensor::full(&[3, 17, 17], 0.5)).unwrap();
    let o = tape(d, &["restore", "--ckpt", "ft.ckpt", "--input", "odd.ppm", "--output", "x.ppm"]);
    assert!(!o.status.success());
    assert!(text(&o).contains("patch_size"), "{}", text(&o));
}

#[test]
fn pretrain_is_reproducible_from_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("small.json"), SMALL).unwrap();
    for out in ["a.ckpt", "b.ckpt"] {
        let o = tape(d, &["pretrain", "--config", "small.json", "--out", out]);
        assert!(o.status.success(), "{}", text(&o));
    }
    assert_eq!(std::fs::read(d.join("a.ckpt")).unwrap(), std::fs::read(d.join("b.ckpt")).unwrap());
    assert_eq!(
        std::fs::read(d.join("a.ckpt.log.csv")).unwrap(),
        std::fs::read(d.join("b.ckpt.log.csv")).unwrap()
    );
}

#[test]
fn bad_invocations_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let o = tape(d, &["pretrain", "--bogus"]);
    assert!(!o.status.success());

    let o = tape(d, &["restore", "--ckpt", "missing.ckpt", "--input", "a.ppm", "--output", "b.ppm"]);
    assert!(!o.status.success());
    assert!(text(&o).contains("missing.ckpt"), "{}", text(&o));

    std::fs::write(d.join("bad.json"), r#"{"model": {"patch_size": 5}}"#).unwrap();
    let o = tape(d, &["pretrain", "--config", "bad.json"]);
    assert!(!o.status.success());
    assert!(text(&o).contains("patch_size"), "{}", text(&o));

    std::fs::write(d.join("junk.ppm"), b"P3\n1 1\n255\n0 0 0\n").unwrap();
    std::fs::write(d.join("small.json"), SMALL).unwrap();
    let o = tape(d, &["pretrain", "--config", "small.json", "--out", "p.ckpt"]);
    assert!(o.status.success());
    let o = tape(d, &["restore", "--ckpt", "p.ckpt", "--input", "junk.ppm", "--output", "o.ppm"]);
    assert!(!o.status.success());
}
