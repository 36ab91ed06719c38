use std::path::Path;
use std::process::{Command, Output};

fn corredit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_corredit"))
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&corredit(&["frobnicate"])), 2);
    assert_eq!(code(&corredit(&["craft", "--out", "x", "--bogus"])), 2);
    assert_eq!(code(&corredit(&["craft"])), 2);
}

#[test]
fn missing_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = corredit(&["distill-cm", "--out", out, "--preset", "smoke", "-q"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("dataset"));
}

#[test]
fn emit_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    let o = corredit(&[
        "craft",
        "--out",
        dir.path().join("run").to_str().unwrap(),
        "--preset",
        "toy",
        "--seed",
        "5",
        "--set",
        "train_dpm.steps=77",
        "--emit-config",
        path.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains("seed = 5"));
    assert!(text.contains("steps = 77"));
    let bad = corredit(&[
        "craft",
        "--out",
        "r",
        "--preset",
        "toy",
        "--set",
        "nope=1",
        "--emit-config",
        "-",
    ]);
    assert_eq!(code(&bad), 1);
}

fn run_stage(out: &str, args: &[&str]) {
    let mut all = vec![args[0], "--out", out, "-q"];
    all.extend_from_slice(&args[1..]);
    let o = corredit(&all);
    assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
}

#[test]
fn smoke_stages_edit_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    run_stage(out_s, &["craft", "--preset", "smoke"]);
    for stage in ["train-classifier", "train-dpm", "distill-cm", "tta-eval", "report"] {
        run_stage(out_s, &[stage]);
    }

    // A different configuration in the same directory is refused.
    let o = corredit(&["train-dpm", "--out", out_s, "--seed", "99", "-q"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("hash"));

    let pics = dir.path().join("pics");
    std::fs::create_dir_all(&pics).unwrap();
    let img = corredit::data::shapes_image(3, 0, 16).image;
    img.save_png(&pics.join("a.png")).unwrap();
    corredit::data::shapes_image(3, 1, 24)
        .image
        .save_png(&pics.join("b.png"))
        .unwrap();
    let edited = dir.path().join("edited");
    run_stage(
        out_s,
        &[
            "edit",
            "--model",
            "cm",
            "--nfe",
            "2",
            "--input",
            pics.to_str().unwrap(),
            "--output",
            edited.to_str().unwrap(),
        ],
    );
    for stem in ["a", "b"] {
        assert!(edited.join(format!("{stem}.png")).exists());
        let side: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(edited.join(format!("{stem}.json"))).unwrap()).unwrap();
        assert_eq!(side["nfe"], 2);
        assert!(side["counted_nfe"].as_u64().unwrap() <= 2);
        assert_eq!(side["model"], "cm");
    }
    let dpm_out = dir.path().join("dpm");
    run_stage(
        out_s,
        &[
            "edit",
            "--model",
            "dpm",
            "--steps",
            "2",
            "--input",
            pics.join("a.png").to_str().unwrap(),
            "--output",
            dpm_out.to_str().unwrap(),
        ],
    );
    let side: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dpm_out.join("a.json")).unwrap()).unwrap();
    assert_eq!(side["nfe"], 6);
    assert_eq!(side["counted_nfe"], 6);

    let report = std::fs::read_to_string(Path::new(out_s).join("report.md")).unwrap();
    assert!(report.contains("| cm-2 | gaussian_noise | 5 |"), "{report}");
}
