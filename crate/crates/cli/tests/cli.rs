use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dynloss(args: &[&str], out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dynloss"));
    cmd.args(args).env_remove("DYNLOSS_OUT");
    if let Some(out) = out {
        cmd.env("DYNLOSS_OUT", out);
    }
    cmd.output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: [&str; 16] = [
    "--set",
    "dataset=blobs",
    "--set",
    "synthetic_train=80",
    "--set",
    "student_hidden=6",
    "--set",
    "dln_hidden=4",
    "--set",
    "teacher_hidden=3,1",
    "--set",
    "warm_start=20",
    "--set",
    "iterations=3",
    "--set",
    "epochs=1",
];

#[test]
fn unknown_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = dynloss(&["train", "--set", "learning_rate=0.1"], Some(dir.path()));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn missing_mnist_dir_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let o = dynloss(&["train", "--set", "mnist_dir=/nonexistent/mnist"], Some(dir.path()));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("mnist_dir"), "{}", stderr(&o));
}

#[test]
fn corrupted_gradcheck_fails_by_name() {
    let o = dynloss(&["gradcheck", "--corrupt", "hvp"], None);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("hvp") && !err.contains("rmd"), "{err}");
}

#[test]
fn train_respects_the_output_variable() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nested");
    let mut args = vec!["train"];
    args.extend(SMALL);
    let o = dynloss(&args, Some(&out));
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("record.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
    assert!(out.join("manifest.json").exists());
}

#[test]
fn config_file_and_overrides_compose() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# base\niterations = 2\nepochs = 1\n").unwrap();
    let mut args = vec!["train"];
    args.extend(SMALL);
    args.extend(["--set", "iterations=2", "--config", cfg.to_str().unwrap()]);
    let o = dynloss(&args, Some(dir.path()));
    assert!(o.status.success(), "{}", stderr(&o));
    let echoed = fs::read_to_string(dir.path().join("config.txt")).unwrap();
    assert!(echoed.lines().any(|l| l.replace(' ', "") == "iterations=2"), "{echoed}");
    assert!(
        echoed.lines().any(|l| l.replace(' ', "") == "dataset=blobs"),
        "{echoed}"
    );
}

#[test]
fn surface_exports_a_checkpoint_grid() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train"];
    args.extend(SMALL);
    assert!(dynloss(&args, Some(dir.path())).status.success());

    let ckpt = dir.path().join("dln.ckpt");
    let mut args = vec![
        "surface",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--epoch",
        "7",
        "--points",
        "3",
    ];
    args.extend(&SMALL[6..8]);
    let o = dynloss(&args, Some(dir.path()));
    assert!(o.status.success(), "{}", stderr(&o));
    let json = fs::read_to_string(dir.path().join("surface_epoch7.json")).unwrap();
    assert!(json.starts_with("{\"epoch\":7,\"x0\":[-3.0,0.0,3.0]"), "{json}");

    args.extend(["--axes", "sideways"]);
    let o = dynloss(&args, Some(dir.path()));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("axes"), "{}", stderr(&o));
}
