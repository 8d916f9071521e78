use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn unimap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unimap"))
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    let json = r#"{
        "dataset_size": 2,
        "ddim_steps": 3,
        "model": {"widths": [4, 6, 8], "d_c": 4, "attn_dim": 4, "time_dim": 4, "temb_dim": 4},
        "train": {"steps": 3, "batch_size": 2},
        "edit": {"images": 1, "ddim_steps": 4, "quantiles": [0.5], "t_masks": [0, 1000]}
    }"#;
    fs::write(&path, json).unwrap();
    path
}

fn train_tiny(dir: &Path) -> PathBuf {
    let cfg = tiny_config(dir);
    let out = dir.join("runs");
    let o = unimap(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    out.join("train-0001/checkpoint")
}

#[test]
fn help_lists_subcommands() {
    let o = unimap(&["--help"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for cmd in ["train", "recon-study", "corr-study", "edit"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn train_writes_checkpoint_and_loss_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = train_tiny(tmp.path());
    assert!(ck.join("manifest.txt").is_file());
    let run = ck.parent().unwrap();
    let loss = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 3);
    let snap = fs::read_to_string(run.join("config.json")).unwrap();
    assert!(snap.contains("\"kind\": \"train\"") && snap.contains("\"seed\": 3"));
}

#[test]
fn studies_run_on_a_tiny_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = train_tiny(tmp.path());
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("runs");
    let common = [
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--checkpoint",
        ck.to_str().unwrap(),
    ];

    let o = unimap(&[&["recon-study", "--mode", "zero"][..], &common].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("recon-study-0001/recon.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
    assert!(csv.lines().skip(1).all(|l| l.contains(",zero,")));

    let o = unimap(&[&["corr-study"][..], &common].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("corr-study-0001/correlation.csv")).unwrap();
    assert!(csv.starts_with("image_id,attn_mse,z0_mse\n"));

    let o = unimap(&[&["edit", "--quantile", "0.7"][..], &common].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let run = out.join("edit-0001");
    for f in [
        "ablation.csv",
        "summary.txt",
        "config.json",
        "images/img000_original.ppm",
        "images/img000_q0.70_t0000.ppm",
        "masks/img000_q0.70_t1000.ppm",
    ] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
}

#[test]
fn errors_are_category_prefixed() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let o = unimap(&[
        "recon-study",
        "--checkpoint",
        "/nonexistent/ck",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).starts_with("error: io error:"), "{}", stderr(&o));

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"seeds": 1}"#).unwrap();
    let o = unimap(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).starts_with("error: config error:"));

    let o = unimap(&["recon-study", "--mode", "sideways"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("unknown attention mode"));

    let one = tmp.path().join("one.json");
    fs::write(&one, r#"{"dataset_size": 1}"#).unwrap();
    let o = unimap(&[
        "corr-study",
        "--config",
        one.to_str().unwrap(),
        "--checkpoint",
        "x",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error: argument error:"));
}
