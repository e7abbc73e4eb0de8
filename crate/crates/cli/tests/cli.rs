use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use uconvert_core::{fuse, read_mvol, write_mvol, Volume};

fn uconvert(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uconvert")).args(args).output().expect("run uconvert")
}

fn ok(args: &[&str]) -> String {
    let out = uconvert(args);
    assert!(
        out.status.success(),
        "uconvert {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = uconvert(args);
    assert!(!out.status.success(), "uconvert {args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, subjects: usize) -> PathBuf {
    let data = dir.join("data");
    ok(&["gen-data", "--subjects", &subjects.to_string(), "--size", "16", "--seed", "7", "--out", s(&data)]);
    data
}

fn train(data: &Path, view: &str, out: &Path) {
    ok(&[
        "train", "--data", s(data), "--view", view, "--epochs", "1", "--train-fraction", "0.5", "--out", s(out),
    ]);
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    entries.sort();
    entries
}

#[test]
fn gen_data_writes_pairs_manifest_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), 3);
    let files = tree(&data);
    assert_eq!(files.iter().filter(|(n, _)| n.ends_with(".mvol")).count(), 6);
    assert!(files.iter().any(|(n, _)| n == "manifest.json"));
    assert!(files.iter().any(|(n, _)| n == "run_config.toml"));

    // Same flags again, same output directory: every byte is reproduced.
    fs::remove_dir_all(&data).unwrap();
    gen(dir.path(), 3);
    assert!(tree(&data) == files, "rerun changed the output tree");

    // The emitted config reproduces the run; only the output key differs.
    let replay = dir.path().join("replay");
    ok(&["gen-data", "--config", s(&data.join("run_config.toml")), "--out", s(&replay)]);
    let strip = |t: Vec<(String, Vec<u8>)>| t.into_iter().filter(|(n, _)| n != "run_config.toml").collect::<Vec<_>>();
    assert!(strip(tree(&replay)) == strip(files), "replayed config produced different data");
}

#[test]
fn validation_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let err = fails(&["gen-data", "--subjects", "1", "--out", s(&dir.path().join("d"))]);
    assert!(err.contains("need at least 2 subjects"), "{err}");

    let err = fails(&["train", "--model", "prsr", "--data", "x", "--out", "y"]);
    assert!(err.contains("model not supported (out of scope)"), "{err}");

    let err = fails(&["train", "--epochs", "1"]);
    assert!(err.contains("missing --data") && err.contains("Usage"), "{err}");

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "epoch = 3\n").unwrap();
    let err = fails(&["train", "--config", s(&cfg)]);
    assert!(err.starts_with("error: ") && err.contains("epoch"), "{err}");
}

#[test]
fn evaluate_prints_aggregates_and_checks_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), 2);
    let tgt = data.join("subject_0_tgt.mvol");
    let src = data.join("subject_0_src.mvol");

    let out = ok(&["evaluate", "--pred", s(&tgt), "--target", s(&tgt)]);
    assert!(out.contains("PSNR inf") && out.contains("SSIM 1.0000"), "{out}");

    let json = dir.path().join("report.json");
    let out = ok(&["evaluate", "--pred", s(&src), "--target", s(&tgt), "--json", s(&json)]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    let psnr = report["psnr_mean"].as_f64().unwrap();
    let ssim = report["ssim_mean"].as_f64().unwrap();
    assert!(out.contains(&format!("PSNR {psnr:.4}")) && out.contains(&format!("SSIM {ssim:.4}")), "{out}");
    assert_eq!(report["n_slices"], 16);
    assert!(dir.path().join("report.config.toml").exists());

    let small = dir.path().join("small.mvol");
    write_mvol(&Volume::filled([16, 16, 8], 0.5).unwrap(), &small).unwrap();
    let err = fails(&["evaluate", "--pred", s(&small), "--target", s(&tgt)]);
    assert!(err.contains("geometry mismatch"), "{err}");
}

#[test]
fn train_convert_and_multiview_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), 2);
    let ckpt = |v: &str| dir.path().join(format!("{v}.ckpt"));
    for view in ["sagittal", "coronal", "axial"] {
        train(&data, view, &ckpt(view));
    }
    assert!(ckpt("sagittal").with_extension("history.jsonl").exists());
    let history = fs::read_to_string(ckpt("sagittal").with_extension("history.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(history.lines().next().unwrap()).unwrap();
    assert_eq!(first["epoch"], 0);

    let src = data.join("subject_1_src.mvol");
    let single = dir.path().join("single.mvol");
    ok(&["convert", "--ckpt", s(&ckpt("sagittal")), "--in", s(&src), "--out", s(&single)]);
    assert_eq!(read_mvol(&single).unwrap().shape(), read_mvol(&src).unwrap().shape());

    let fused = dir.path().join("fused.mvol");
    let (sag, cor, ax) = (ckpt("sagittal"), ckpt("coronal"), ckpt("axial"));
    ok(&[
        "convert", "--multiview", "--keep-views", "--ckpt", s(&sag), "--ckpt-coronal", s(&cor), "--ckpt-axial",
        s(&ax), "--in", s(&src), "--out", s(&fused),
    ]);
    let views: Vec<Volume> = ["sagittal", "coronal", "axial"]
        .iter()
        .map(|v| read_mvol(fused.with_extension(format!("{v}.mvol"))).unwrap())
        .collect();
    assert_eq!(read_mvol(&fused).unwrap(), fuse(&views).unwrap());
    assert_eq!(views[0], read_mvol(&single).unwrap());

    let err = fails(&[
        "convert", "--multiview", "--ckpt", s(&sag), "--ckpt-coronal", s(&cor), "--in", s(&src), "--out", s(&fused),
    ]);
    assert!(err.contains("three view checkpoints required"), "{err}");

    // Replaying the emitted training config reproduces the model.
    let replay = dir.path().join("replay.ckpt");
    ok(&["train", "--config", s(&sag.with_extension("config.toml")), "--out", s(&replay)]);
    let again = dir.path().join("again.mvol");
    ok(&["convert", "--ckpt", s(&replay), "--in", s(&src), "--out", s(&again)]);
    assert_eq!(fs::read(&again).unwrap(), fs::read(&single).unwrap());
}

#[test]
fn benchmark_rows_have_schema_and_size_ordering() {
    let dir = tempfile::tempdir().unwrap();
    let mut params = Vec::new();
    for model in ["espcn", "uconvert", "srgan"] {
        let out = dir.path().join(format!("{model}.json"));
        let line = ok(&["benchmark", "--model", model, "--size", "16", "--out", s(&out)]);
        let row: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(row, serde_json::from_str::<serde_json::Value>(&fs::read_to_string(&out).unwrap()).unwrap());
        assert_eq!(row["model"], model);
        assert!(row["sec_per_epoch"].as_f64().unwrap() > 0.0);
        assert!(row["sec_per_slice"].as_f64().unwrap() > 0.0);
        params.push(row["params"].as_u64().unwrap());
    }
    assert!(params[0] < params[1] && params[1] < params[2], "{params:?}");
}
