use std::path::Path;
use std::process::{Command, Output};

fn vidseg(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vidseg"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

#[test]
fn cost_json_has_exact_integers() {
    let tmp = tempfile::tempdir().unwrap();
    let out = vidseg(&["cost", "--n", "10,100,10000", "--json", "c.json"], tmp.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("c.json")).unwrap()).unwrap();
    let last = &v["reports"][2];
    assert_eq!(last["vanilla"].as_u64(), Some(3_000_000_000_000));
    assert_eq!(last["decoupled"].as_u64(), Some(300_240_000));
    assert_eq!(v["advantage_increasing"], serde_json::Value::Bool(true));
}

#[test]
fn gen_train_infer_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&vidseg(&["gen", "--seed", "5", "--out", "clip"], d)), 0);
    std::fs::write(d.join("run.cfg"), "# short run\niterations=10\nwarmup=2\n").unwrap();
    let out = vidseg(&["train", "--config", "run.cfg", "--set", "samples=2", "--out", "ck"], d);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("ck/manifest.txt").exists() && d.join("ck/metrics.json").exists());
    let frames = "clip/frame_t-2.msat,clip/frame_t-1.msat,clip/frame_t.msat";
    assert_eq!(code(&vidseg(&["infer", "--ckpt", "ck", "--frames", frames, "--out", "pred.msat"], d)), 0);
    let out = vidseg(&["eval", "--pred", "pred.msat", "--gt", "clip/gt.msat", "--classes", "4", "--json", "m.json"], d);
    assert_eq!(code(&out), 0);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("m.json")).unwrap()).unwrap();
    let miou = v["miou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&miou));

    // Ground truth against itself is perfect.
    let out = vidseg(&["eval", "--pred", "clip/gt.msat", "--gt", "clip/gt.msat", "--classes", "4"], d);
    assert!(String::from_utf8_lossy(&out.stdout).contains("mIoU 1.0000"));
}

#[test]
fn usage_and_format_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&vidseg(&["cost"], d)), 2);
    assert_eq!(code(&vidseg(&["no-such-command"], d)), 2);
    assert_eq!(code(&vidseg(&["train", "--set", "bogus=1"], d)), 2);
    std::fs::write(d.join("junk.msat"), b"NOPE").unwrap();
    assert_eq!(code(&vidseg(&["eval", "--pred", "junk.msat", "--gt", "junk.msat", "--classes", "2"], d)), 2);
}

#[test]
fn failing_gradient_check_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let out = vidseg(&["gradcheck", "--seeds", "1", "--tol", "1e-14", "--pipeline-tol", "1e-14"], tmp.path());
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn gradient_check_passes_at_default_tolerances() {
    let tmp = tempfile::tempdir().unwrap();
    let out = vidseg(&["gradcheck", "--seeds", "2"], tmp.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn bench_reports_slopes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = vidseg(&["bench", "--sizes", "16,64,256", "--count-macs"], tmp.path());
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("spatial 2.0000, temporal 1.0000"));
}
