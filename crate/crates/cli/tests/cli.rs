use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_terntrain"));
    c.env_remove("TERNTRAIN_SEED");
    c
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/two-moons").join(name)
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        "arch = in:2,dense:16,relu,dense:2\ntrain_csv = {}\ntest_csv = {}\nbatch_size = 20\nepochs = 4\nseed = 3\n\
         optimizer = sgd-momentum\nlr = 0.05\nthreshold_lr = 1e-4\noutput_dir = out\n{extra}",
        data("train.csv").display(),
        data("test.csv").display()
    );
    let path = dir.join("run.cfg");
    fs::write(&path, text).unwrap();
    path
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn meta(out: &Output, key: &str) -> String {
    stdout(out)
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")).map(str::to_string))
        .unwrap_or_else(|| panic!("no {key} in output"))
}

fn pretrained(extra: &str) -> (TempDir, PathBuf, Output) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), extra);
    let out = run(bin().arg("pretrain").arg("--config").arg(&cfg));
    (dir, cfg, out)
}

#[test]
fn gradcheck_passes() {
    let out = run(bin().args(["gradcheck", "--seed", "5"]));
    let text = stdout(&out);
    assert!(text.lines().count() >= 5);
    assert!(text.lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bogus_key = 1\n");
    let out = bin().arg("pretrain").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus_key"));
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(bin().arg("--help").output().unwrap().status.code(), Some(0));
}

#[test]
fn missing_checkpoint_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = bin().arg("quantize").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["inspect", "--checkpoint"]).arg(dir.path().join("nope.tnck")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn full_pipeline() {
    let (dir, cfg, out) = pretrained("");
    let outdir = dir.path().join("out");
    for f in ["pretrain.tnck", "pretrain_metrics.csv", "pretrain_run_info.json"] {
        assert!(outdir.join(f).exists(), "{f} missing");
    }
    let info: serde_json::Value = serde_json::from_str(&fs::read_to_string(outdir.join("pretrain_run_info.json")).unwrap()).unwrap();
    assert_eq!(info["seed"], 3);
    assert_eq!(info["command"], "pretrain");
    let csv = fs::read_to_string(outdir.join("pretrain_metrics.csv")).unwrap();
    assert!(csv.starts_with("epoch,split,loss,accuracy"));
    assert_eq!(csv.lines().count(), 1 + 2 * 4);

    let float_ckpt = outdir.join("pretrain.tnck");
    let eval = run(bin().arg("eval").arg("--config").arg(&cfg).arg("--checkpoint").arg(&float_ckpt).args(["--mode", "float"]));
    assert_eq!(stdout(&eval).trim(), meta(&out, "float_test_accuracy"));
    let refused = bin().arg("eval").arg("--config").arg(&cfg).arg("--checkpoint").arg(&float_ckpt).output().unwrap();
    assert_eq!(refused.status.code(), Some(2));

    let q = run(bin().arg("quantize").arg("--config").arg(&cfg).args(["--epochs", "3"]));
    assert_eq!(meta(&q, "epochs"), "3");
    assert_eq!(meta(&q, "grad_correctness"), "true");
    let tern = outdir.join("ternary.tnck");
    let eval = run(bin().arg("eval").arg("--config").arg(&cfg).arg("--checkpoint").arg(&tern).args(["--split", "train"]));
    assert_eq!(stdout(&eval).trim(), meta(&q, "ternary_train_accuracy"));
    let acc: f64 = meta(&q, "ternary_test_accuracy").parse().unwrap();
    assert!(acc > 0.8, "ternary accuracy {acc}");

    let packed = dir.path().join("model.tern");
    let report = dir.path().join("report.json");
    run(bin().args(["export", "--checkpoint"]).arg(&tern).arg("--output").arg(&packed).arg("--report").arg(&report));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(report["file_bytes"].as_u64().unwrap(), fs::metadata(&packed).unwrap().len());
    assert_eq!(report["layers"].as_array().unwrap().len(), 2);

    let text = stdout(&run(bin().args(["inspect", "--checkpoint"]).arg(&tern)));
    assert!(text.starts_with("fc1 params=32"));
    let json: serde_json::Value = serde_json::from_str(&stdout(&run(bin().args(["inspect", "--json", "--checkpoint"]).arg(&tern)))).unwrap();
    assert!(json[0]["scale"].as_f64().unwrap() > 0.0);
}

#[test]
fn reruns_are_bit_identical() {
    let (a, cfg_a, _) = pretrained("");
    let (b, cfg_b, _) = pretrained("");
    let read = |d: &TempDir, f: &str| fs::read(d.path().join("out").join(f)).unwrap();
    assert_eq!(read(&a, "pretrain_metrics.csv"), read(&b, "pretrain_metrics.csv"));
    assert_eq!(read(&a, "pretrain.tnck"), read(&b, "pretrain.tnck"));
    run(bin().arg("quantize").arg("--config").arg(&cfg_a).args(["--epochs", "2"]));
    run(bin().arg("quantize").arg("--config").arg(&cfg_b).args(["--epochs", "2"]));
    assert_eq!(read(&a, "quantize_metrics.csv"), read(&b, "quantize_metrics.csv"));
    assert_eq!(read(&a, "ternary.tnck"), read(&b, "ternary.tnck"));
}

#[test]
fn seed_override_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = run(bin().arg("pretrain").arg("--config").arg(&cfg).args(["--epochs", "1"]).env("TERNTRAIN_SEED", "11"));
    assert_eq!(meta(&out, "seed"), "11");
    let info = fs::read_to_string(dir.path().join("out/pretrain_run_info.json")).unwrap();
    let info: serde_json::Value = serde_json::from_str(&info).unwrap();
    assert_eq!(info["seed"], 11);
    let (other, _, _) = pretrained("");
    let _ = run(bin().arg("pretrain").arg("--config").arg(other.path().join("run.cfg")).args(["--epochs", "1"]));
    assert_ne!(
        fs::read(dir.path().join("out/pretrain_metrics.csv")).unwrap(),
        fs::read(other.path().join("out/pretrain_metrics.csv")).unwrap()
    );
}

#[test]
fn quantize_flags_are_honored() {
    let (_dir, cfg, _) = pretrained("");
    let q = run(bin().arg("quantize").arg("--config").arg(&cfg).args(["--epochs", "1", "--init-frac", "0.25", "--no-grad-correctness"]));
    assert_eq!(meta(&q, "init_frac"), "0.25");
    assert_eq!(meta(&q, "grad_correctness"), "false");
    let bad = bin().arg("quantize").arg("--config").arg(&cfg).args(["--init-frac", "-1"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
}
