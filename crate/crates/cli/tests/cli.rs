use std::path::Path;
use std::process::{Command, Output};

fn cora(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cora"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("run cora")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cora(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: [&str; 8] = ["--set", "repr_dim=8", "--set", "hd_layers=1", "--set", "fusion_layers=1", "--set", "few_shot=0.2"];

fn prepared() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--regime", "heterogeneous", "--channels", "4", "--length", "2048", "--out", "s.csv"]);
    let mut args = vec!["pretrain", "--out", "bb.bin"];
    args.extend(SMALL);
    ok(d, &args);
    dir
}

#[test]
fn synth_fit_eval_export() {
    let dir = prepared();
    let d = dir.path();
    assert!(d.join("s.truth.json").exists());

    let mut fit = vec!["fit", "--data", "s.csv", "--backbone", "bb.bin", "--out-dir", "run", "--set", "epochs=2"];
    fit.extend(SMALL);
    let stdout = ok(d, &fit);
    assert!(stdout.contains("test mse"), "{stdout}");
    for f in ["adapter.bin", "metrics.csv", "summary.csv", "timing.csv", "config.toml"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,train_mse,l_pos,l_neg,l_aux,val_mse\n"));
    assert_eq!(metrics.lines().count(), 3);

    // The saved config reproduces the run.
    let again = ["fit", "--data", "s.csv", "--backbone", "bb.bin", "--out-dir", "run2", "--config", "run/config.toml"];
    ok(d, &again);
    let a = std::fs::read(d.join("run/metrics.csv")).unwrap();
    let b = std::fs::read(d.join("run2/metrics.csv")).unwrap();
    assert_eq!(a, b);

    let mut eval = vec!["eval", "--data", "s.csv", "--backbone", "bb.bin", "--adapter", "run/adapter.bin"];
    eval.extend(SMALL);
    let stdout = ok(d, &eval);
    let summary = std::fs::read_to_string(d.join("run/summary.csv")).unwrap();
    let test_mse = summary.lines().find_map(|l| l.strip_prefix("test_mse,")).unwrap();
    assert!(stdout.contains(test_mse), "{stdout} vs {summary}");

    let export = [
        "export-sim", "--data", "s.csv", "--backbone", "bb.bin", "--adapter", "run/adapter.bin", "--windows", "0,2",
        "--correlation", "--out-dir", "sim", "--set", "few_shot=0.2",
    ];
    ok(d, &export);
    for f in ["sim_w0_pos.csv", "sim_w0_neg.csv", "sim_w2_pos.csv", "corr_w2.csv"] {
        let text = std::fs::read_to_string(d.join("sim").join(f)).unwrap();
        assert!(text.starts_with("channel,ch0,ch1,ch2,ch3\n"), "{f}");
        assert_eq!(text.lines().count(), 5);
    }
}

#[test]
fn ablate_and_bench_write_tables() {
    let dir = prepared();
    let d = dir.path();
    let mut ablate = vec![
        "ablate", "--data", "s.csv", "--backbone", "bb.bin", "--seeds", "0", "--out", "abl.csv", "--set", "epochs=1",
    ];
    ablate.extend(SMALL);
    ok(d, &ablate);
    let table = std::fs::read_to_string(d.join("abl.csv")).unwrap();
    assert!(table.starts_with("row,name,seed,test_mse,test_mae\n"));
    assert_eq!(table.lines().count(), 1 + 5 * 2);

    let bench = ["bench", "--mode", "inference", "--channels", "4,8,16,32", "--reps", "1", "--out", "bench.csv"];
    let stdout = ok(d, &bench);
    assert!(stdout.contains("log-log slope"));
    assert_eq!(std::fs::read_to_string(d.join("bench.csv")).unwrap().lines().count(), 5);
}

#[test]
fn exit_codes() {
    let dir = prepared();
    let d = dir.path();
    let code = |args: &[&str]| cora(d, args).status.code();

    assert_eq!(code(&["fit", "--data", "s.csv", "--backbone", "bb.bin", "--out-dir", "x", "--set", "lr=-1"]), Some(2));
    assert_eq!(code(&["fit", "--data", "s.csv", "--backbone", "bb.bin", "--out-dir", "x", "--set", "nope=1"]), Some(2));
    assert_eq!(code(&["fit", "--data", "missing.csv", "--backbone", "bb.bin", "--out-dir", "x"]), Some(3));
    std::fs::write(d.join("junk.bin"), b"not a checkpoint").unwrap();
    assert_eq!(code(&["eval", "--data", "s.csv", "--backbone", "junk.bin"]), Some(3));

    let mut diverge = vec![
        "fit", "--data", "s.csv", "--backbone", "bb.bin", "--out-dir", "div", "--set", "lr=1e150", "--set",
        "warmup_epochs=0", "--set", "epochs=3",
    ];
    diverge.extend(SMALL);
    assert_eq!(code(&diverge), Some(4));
    // The last finite parameters are still written.
    assert!(d.join("div/adapter.bin").exists());
    let summary = std::fs::read_to_string(d.join("div/summary.csv")).unwrap();
    assert!(!summary.contains("diverged_epoch,\n"), "{summary}");
}
