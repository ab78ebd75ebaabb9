use std::fs;
use std::path::{Path, PathBuf};

use pneumo_cli::{run, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VERIFY};
use pneumo_core::data::load_dataset;
use pneumo_core::model::load_checkpoint;

fn pneumo(args: &[&str]) -> i32 {
    let mut full = vec!["pneumo"];
    full.extend_from_slice(args);
    run(full)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_data(dir: &Path) -> PathBuf {
    let out = dir.join("small.pnds");
    assert_eq!(pneumo(&["gen-data", "--n", "45", "--patients", "15", "--sep", "4", "--out", s(&out)]), EXIT_OK);
    out
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(pneumo(&["--help"]), EXIT_OK);
    assert_eq!(pneumo(&["--version"]), EXIT_OK);
    assert_eq!(pneumo(&["cv", "--help"]), EXIT_OK);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(pneumo(&[]), EXIT_USAGE);
    assert_eq!(pneumo(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(pneumo(&["cv", "--data", "x.pnds"]), EXIT_USAGE);
    assert_eq!(pneumo(&["cv", "--data", "x", "--out", "y", "--prompt", "oracle"]), EXIT_USAGE);
    assert_eq!(pneumo(&["cv", "--data", "x", "--out", "y", "--emitter", "maybe"]), EXIT_USAGE);
}

#[test]
fn gen_data_writes_readable_dataset_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.pnds");
    let csv = dir.path().join("d.csv");
    assert_eq!(
        pneumo(&["gen-data", "--n", "30", "--pos-ratio", "0.5", "--width", "6", "--seed", "3", "--out", s(&data), "--csv", s(&csv)]),
        EXIT_OK
    );
    let ds = load_dataset(&data).unwrap();
    assert_eq!((ds.len(), ds.feature_width(), ds.meta.positives, ds.meta.patients), (30, 6, 15, 10));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "patient_id,label,f0,f1,f2,f3,f4,f5");
    assert_eq!(text.lines().count(), 31);

    let again = dir.path().join("again.csv");
    assert_eq!(pneumo(&["export-csv", "--data", s(&data), "--out", s(&again)]), EXIT_OK);
    assert_eq!(fs::read(&again).unwrap(), text.as_bytes());
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cv.csv");
    assert_eq!(pneumo(&["cv", "--data", s(&dir.path().join("missing.pnds")), "--out", s(&out)]), EXIT_RUNTIME);

    let garbage = dir.path().join("garbage.pnds");
    fs::write(&garbage, b"not a dataset").unwrap();
    assert_eq!(pneumo(&["cv", "--data", s(&garbage), "--out", s(&out)]), EXIT_RUNTIME);

    let narrow = dir.path().join("narrow.pnds");
    assert_eq!(pneumo(&["gen-data", "--n", "12", "--width", "5", "--out", s(&narrow)]), EXIT_OK);
    assert_eq!(pneumo(&["cv", "--data", s(&narrow), "--out", s(&out)]), EXIT_RUNTIME);
    assert!(!out.exists());
}

#[test]
fn invalid_configs_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let out = dir.path().join("out.csv");
    assert_eq!(pneumo(&["sweep-m", "--data", s(&data), "--m", "0", "--out", s(&out)]), EXIT_USAGE);
    assert_eq!(pneumo(&["cv", "--data", s(&data), "--out", s(&out), "--epochs", "1"]), EXIT_USAGE);
    assert_eq!(pneumo(&["ablate", "--data", s(&data), "--out", s(&out), "--variant", "warp=on"]), EXIT_USAGE);

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nepochs = 5\nlearning_rate = 0.1\n").unwrap();
    assert_eq!(pneumo(&["cv", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]), EXIT_USAGE);
    assert!(!out.exists());
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, "[train]\nepochs = 4\nwarmup_epochs = 1\n\n[cv]\nfolds = 3\n").unwrap();
    let out = dir.path().join("cv.csv");
    let report = dir.path().join("cv.md");
    let args = ["cv", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--report", s(&report), "--folds", "2"];
    assert_eq!(pneumo(&args), EXIT_OK);
    let csv = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,fold,sens,spec,acc,auc,avg");
    // The flag wins over the file: two folds plus the mean row.
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("cv,mean,"));
    let md = fs::read_to_string(&report).unwrap();
    assert!(md.contains("config hash: `"));
}

#[test]
fn train_then_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let ckpt = dir.path().join("model.pnlm");
    assert_eq!(pneumo(&["train", "--data", s(&data), "--epochs", "3", "--out", s(&ckpt)]), EXIT_OK);
    let loss = fs::read_to_string(dir.path().join("model.pnlm.loss.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("epoch,loss"));
    assert_eq!(loss.lines().count(), 4);
    let model = load_checkpoint(&ckpt, None).unwrap();

    let out_dir = dir.path().join("inspect");
    let args = ["inspect", "--data", s(&data), "--checkpoint", s(&ckpt), "--sample", "2", "--out-dir", s(&out_dir)];
    assert_eq!(pneumo(&args), EXIT_OK);
    let map = fs::read_to_string(out_dir.join("context_map.csv")).unwrap();
    let d = model.source_tokens();
    let m = model.diag_tokens();
    assert_eq!(map.lines().count(), d + 1);
    for line in map.lines().skip(1) {
        assert_eq!(line.split(',').count(), m + 1);
    }
    for l in 0..model.config.stack.layers {
        for h in 0..model.config.stack.heads {
            let attn = fs::read_to_string(out_dir.join(format!("attention_block{l}_head{h}.csv"))).unwrap();
            assert_eq!(attn.lines().count(), d + m + 1);
        }
    }
    let bad = ["inspect", "--data", s(&data), "--checkpoint", s(&ckpt), "--sample", "45", "--out-dir", s(&out_dir)];
    assert_eq!(pneumo(&bad), EXIT_USAGE);
}

#[test]
fn sweep_rows_are_named_by_token_count() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let out = dir.path().join("sweep.csv");
    let args = ["sweep-m", "--data", s(&data), "--m", "1,3", "--epochs", "3", "--folds", "2", "--out", s(&out)];
    assert_eq!(pneumo(&args), EXIT_OK);
    let csv = fs::read_to_string(&out).unwrap();
    let names: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["m=1", "m=1", "m=1", "m=3", "m=3", "m=3"]);
}

#[test]
fn ablate_quotes_switch_list_names() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let out = dir.path().join("ablate.csv");
    let args = [
        "ablate", "--data", s(&data), "--epochs", "3", "--folds", "2", "--variant", "coop", "--variant",
        "prompt=fixed,m=2,pooling=last", "--out", s(&out),
    ];
    assert_eq!(pneumo(&args), EXIT_OK);
    let csv = fs::read_to_string(&out).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("+coop,mean,")));
    assert!(csv.lines().any(|l| l.starts_with("\"prompt=fixed,m=2,pooling=last\",mean,")));
}

#[test]
fn grad_check_passes_and_reports_failure_as_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("grad.csv");
    assert_eq!(pneumo(&["grad-check", "--out", s(&out)]), EXIT_OK);
    let csv = fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("case,path,param,entries,max_rel_err\n"));
    assert!(csv.lines().any(|l| l.starts_with("engine+emitter,Batched,engine.w1,")));
    assert_eq!(pneumo(&["grad-check", "--tol", "0"]), EXIT_VERIFY);
    assert_eq!(pneumo(&["grad-check", "--step", "1"]), EXIT_USAGE);
}
