use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dapnet(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dapnet"))
        .args(args)
        .env("DAPNET_RUN_ROOT", root)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn synth_train_predict_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("runs");
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_owned();

    let o = dapnet(
        &root,
        &[
            "synth",
            "--out",
            &p("scene.pts"),
            "--extent",
            "20",
            "--density",
            "1",
            "--seed",
            "4",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    fs::write(
        p("run.toml"),
        "epochs = 5\nblock_size = 10.0\nstride = 5.0\nmin_points = 20\nsample_points = 64\n",
    )
    .unwrap();
    let o = dapnet(
        &root,
        &[
            "train",
            "--data",
            &p("scene.pts"),
            "--config",
            &p("run.toml"),
            "--epochs",
            "1",
            "--run-name",
            "smoke",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = root.join("smoke");
    let snapshot = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(snapshot.contains("epochs = 1"), "{snapshot}");
    assert!(snapshot.contains("scene.pts"));
    assert_eq!(fs::read_to_string(run.join("log.csv")).unwrap().lines().count(), 2);

    let ckpt = run.join("best.ckpt");
    let o = dapnet(
        &root,
        &[
            "predict",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--input",
            &p("scene.pts"),
            "--out",
            &p("pred.pts"),
            "--config",
            &p("run.toml"),
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let out_dir = p("report");
    let o = dapnet(
        &root,
        &[
            "eval",
            "--reference",
            &p("scene.pts"),
            "--prediction",
            &p("pred.pts"),
            "--out-dir",
            &out_dir,
            "--error-map",
            &p("errors.pts"),
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("OA "));
    assert!(Path::new(&out_dir).join("metrics.csv").exists());
    let n = fs::read_to_string(p("scene.pts"))
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .count();
    let m = fs::read_to_string(p("errors.pts"))
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .count();
    assert_eq!(n, m);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_eq!(dapnet(root, &["--help"]).status.code(), Some(0));
    assert_eq!(dapnet(root, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        dapnet(root, &["train", "--data", "/no/such/file.pts"]).status.code(),
        Some(2)
    );

    let bad = root.join("bad.pts");
    fs::write(&bad, "1 2 3 0.5 1 1 0\nnot a point\n").unwrap();
    let o = dapnet(root, &["train", "--data", bad.to_str().unwrap(), "--epochs", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        String::from_utf8_lossy(&o.stderr).contains("bad.pts:2:"),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn predict_rejects_mismatched_classes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("runs");
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_owned();
    let synth = |out: &str, classes: &str| {
        let o = dapnet(
            &root,
            &[
                "synth",
                "--out",
                &p(out),
                "--extent",
                "16",
                "--density",
                "1",
                "--classes",
                classes,
            ],
        );
        assert!(o.status.success());
    };
    synth("four.pts", "ground,roof,tree,car");
    synth("three.pts", "ground,roof,tree");
    let o = dapnet(
        &root,
        &[
            "train",
            "--data",
            &p("three.pts"),
            "--epochs",
            "1",
            "--min-points",
            "10",
            "--sample-points",
            "128",
            "--run-name",
            "r",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = root.join("r").join("last.ckpt");
    let o = dapnet(
        &root,
        &[
            "predict",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--input",
            &p("four.pts"),
            "--out",
            &p("x.pts"),
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("classes"));
}
