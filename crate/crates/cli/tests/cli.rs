use std::path::Path;
use std::process::{Command, Output};

fn ctlformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctlformer"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn corpus(dir: &Path) {
    let o = ctlformer(&[
        "phantom-gen",
        "--out",
        s(dir),
        "--patients",
        "2",
        "--slices",
        "2",
        "--size",
        "32",
        "--seed",
        "4",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("wrote 4 slice pairs"));
}

fn train(data: &Path, out: &Path, steps: &str, resume: Option<&Path>) -> Output {
    let mut args = vec![
        "train",
        "--data",
        s(data),
        "--holdout",
        "L096-syn",
        "--out",
        s(out),
        "--config",
        "tiny",
        "--steps",
        steps,
        "--checkpoint-every",
        "2",
        "--lr",
        "1e-3",
    ];
    if let Some(r) = resume {
        args.extend(["--resume", s(r)]);
    }
    ctlformer(&args)
}

#[test]
fn param_count_reports_distance_from_budget() {
    let o = ctlformer(&["param-count"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("1,805,126 parameters"), "{out}");
    assert!(out.contains("target 1,850,000 (-2.43%)"), "{out}");
    let o = ctlformer(&["param-count", "--config", "huge"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn grad_check_passes_on_tiny_config() {
    let o = ctlformer(&["grad-check"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("gradient checks passed"));
}

#[test]
fn train_eval_denoise_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("corpus");
    corpus(&data);
    let ck = dir.path().join("tiny.ctlf");

    let o = train(&data, &ck, "4", None);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(dir.path().join("tiny.log.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);
    assert!(log.starts_with("step,loss,wall_ms\n"));

    let o = train(&data, &ck, "6", Some(&ck));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("at step 6"));
    let log = std::fs::read_to_string(dir.path().join("tiny.log.csv")).unwrap();
    let steps: Vec<&str> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(steps, ["1", "2", "3", "4", "5", "6"]);

    let o = train(&data, &ck, "6", Some(&ck));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = ctlformer(&[
        "eval",
        "--ckpt",
        s(&ck),
        "--data",
        s(&data),
        "--holdout",
        "L096-syn",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("holdout L096-syn: 2 slices"), "{out}");
    assert!(
        out.contains("mean (denoised)") && out.contains("mean (noisy input)"),
        "{out}"
    );

    let o = ctlformer(&[
        "eval",
        "--ckpt",
        s(&ck),
        "--data",
        s(&data),
        "--holdout",
        "L096-syn",
        "--csv",
    ]);
    assert!(stdout(&o).starts_with("Method,SSIM,RMSE,params\n"));

    let slice = data.join("L096-syn").join("000.noisy.ctsl");
    for name in ["out.ctsl", "out.pgm"] {
        let out = dir.path().join(name);
        let o = ctlformer(&[
            "denoise",
            "--ckpt",
            s(&ck),
            "--in",
            s(&slice),
            "--out",
            s(&out),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(out.exists());
    }

    let o = ctlformer(&[
        "denoise",
        "--ckpt",
        s(&ck),
        "--in",
        s(&slice),
        "--out",
        "x.ctsl",
        "--tile",
        "64",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--tile"), "{}", stderr(&o));

    let o = ctlformer(&[
        "eval",
        "--ckpt",
        s(&ck),
        "--data",
        s(&data),
        "--holdout",
        "L999-syn",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_files_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ctlf");
    let o = ctlformer(&[
        "denoise",
        "--ckpt",
        s(&missing),
        "--in",
        "a.ctsl",
        "--out",
        "b.ctsl",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    let junk = dir.path().join("junk.ctlf");
    std::fs::write(&junk, b"definitely not a checkpoint").unwrap();
    let o = ctlformer(&[
        "denoise",
        "--ckpt",
        s(&junk),
        "--in",
        "a.ctsl",
        "--out",
        "b.ctsl",
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));

    let o = ctlformer(&[
        "train",
        "--data",
        s(dir.path()),
        "--holdout",
        "x",
        "--out",
        "o.ctlf",
        "--lr",
        "-1",
    ]);
    assert_eq!(o.status.code(), Some(2));
}
