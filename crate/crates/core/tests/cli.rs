//! The binary's contract: JSON on stdout, exit codes, resolved configs.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_duskforge"));
    c.env("DUSKFORGE_THREADS", "1").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> (i32, Value, Output) {
    let out = bin().args(args).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    let json = serde_json::from_str(&stdout).unwrap_or(Value::Null);
    (out.status.code().unwrap(), json, out)
}

const TINY: &[&str] = &[
    "--set", "data.num_classes=10",
    "--set", "data.image_size=16",
    "--set", "data.train_per_class=3",
    "--set", "data.val_per_class=2",
    "--set", "data.test_per_class=3",
    "--set", "model.widths=4,6",
    "--set", "model.head_hidden=8",
    "--set", "model.head_out=6",
    "--set", "darkener.widths=4",
    "--set", "train.batch_size=4",
    "--set", "pretrain.steps=3",
    "--set", "stage1.steps=3",
    "--set", "stage2.steps=3",
];

fn args<'a>(cmd: &'a str, root: &'a str, out: &'a str, extra: &[&'a str]) -> Vec<String> {
    let mut v = vec![cmd.to_string(), "--set".into(), format!("data.root={root}"), "--set".into(), format!("paths.out={out}")];
    v.extend(TINY.iter().map(|s| s.to_string()));
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

fn run_s(v: &[String]) -> (i32, Value, Output) {
    let refs: Vec<&str> = v.iter().map(String::as_str).collect();
    run(&refs)
}

#[test]
fn unknown_keys_are_listed_with_validation_exit() {
    let (code, json, out) = run(&["pretrain", "--set", "train.lr=1", "--set", "bogus.key=2"]);
    assert_eq!(code, 1);
    let msg = json["error"].as_str().unwrap();
    assert!(msg.contains("train.lr") && msg.contains("bogus.key"), "{msg}");
    assert!(!out.stderr.is_empty());
}

#[test]
fn config_file_keys_are_checked() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    std::fs::write(&cfg, "# comment\nseed = 4\nnot.a.key = 1\n").unwrap();
    let (code, json, _) = run(&["gradcheck", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(json["error"].as_str().unwrap().contains("not.a.key"));
}

#[test]
fn bad_usage_is_a_validation_error() {
    assert_eq!(run(&["darken", "--input", "x.ppm"]).0, 1);
    assert_eq!(run(&["no-such-command"]).0, 1);
    assert_eq!(run(&["--help"]).0, 0);
}

#[test]
fn gradcheck_passes_and_writes_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gc");
    let (code, json, _) = run(&["gradcheck", "--set", &format!("paths.out={}", out.display())]);
    assert_eq!(code, 0);
    assert_eq!(json["passed"], Value::Bool(true));
    assert!(json["checks"].as_array().unwrap().len() > 40);
    let resolved = std::fs::read_to_string(out.join("resolved.conf")).unwrap();
    assert!(resolved.contains("stage1.lr = 1e-3"));
}

fn write_gray(path: &Path, v: u8) {
    let mut bytes = b"P6\n4 4\n255\n".to_vec();
    bytes.extend(std::iter::repeat_n(v, 48));
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn darken_with_heuristic_and_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.ppm");
    write_gray(&input, 200);
    let output = dir.path().join("out/dark.ppm");
    let (code, json, _) = run(&[
        "darken", "--set", "curve.family=brightness", "--input", input.to_str().unwrap(),
        "--exposure", "0.1", "--output", output.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{json}");
    assert!(json["output_mean"].as_f64().unwrap() < json["input_mean"].as_f64().unwrap());
    assert!(output.exists() && dir.path().join("out/resolved.conf").exists());

    std::fs::write(dir.path().join("bad.ppm"), b"P6\n4 4\n255\n\x00").unwrap();
    let (code, json, _) = run(&[
        "darken", "--set", "curve.family=brightness", "--input", dir.path().join("bad.ppm").to_str().unwrap(),
        "--exposure", "0.1", "--output", output.to_str().unwrap(),
    ]);
    assert_eq!(code, 1);
    assert!(json["error"].as_str().unwrap().contains("truncated"));

    let (code, _, _) = run(&[
        "darken", "--input", input.to_str().unwrap(), "--exposure", "1.5", "--output", output.to_str().unwrap(),
    ]);
    assert_eq!(code, 1);
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let runs = dir.path().join("run");
    let (root_s, run_s_) = (root.to_str().unwrap(), runs.to_str().unwrap());

    let (code, json, _) = run_s(&args("generate-data", root_s, run_s_, &[]));
    assert_eq!(code, 0);
    assert_eq!(json["splits"].as_array().unwrap().len(), 4);

    let (code, json, _) = run_s(&args("pretrain", root_s, run_s_, &[]));
    assert_eq!(code, 0, "{json}");
    let day = json["checkpoint"].as_str().unwrap().to_string();
    assert!(runs.join("pretrain.jsonl").exists() && runs.join("resolved.conf").exists());

    // An untrained classifier sits near chance on ten classes.
    let (code, json, _) = run_s(&args("pretrain", root_s, &format!("{run_s_}/chance"), &["--set", "pretrain.steps=0"]));
    assert_eq!(code, 0);
    let chance = json["checkpoint"].as_str().unwrap().to_string();
    let (_, ev, _) = run_s(&args("evaluate", root_s, run_s_, &["--checkpoint", &chance, "--split", "test_day"]));
    assert!(ev["top1"].as_f64().unwrap() <= 40.0);

    let day_set = format!("paths.day_ckpt={day}");
    let (code, json, _) = run_s(&args("train-darkener", root_s, run_s_, &["--set", &day_set]));
    assert_eq!(code, 0, "{json}");
    let dk = json["checkpoint"].as_str().unwrap().to_string();
    assert_eq!(json["exposure_fidelity"].as_array().unwrap().len(), 5);

    let dk_set = format!("paths.darkener_ckpt={dk}");
    let (code, json, _) = run_s(&args("adapt", root_s, run_s_, &["--set", &day_set, "--set", &dk_set]));
    assert_eq!(code, 0, "{json}");
    let adapted = json["checkpoint"].as_str().unwrap().to_string();

    let eval = args("evaluate", root_s, run_s_, &["--set", &dk_set, "--checkpoint", &adapted]);
    let (code, a, _) = run_s(&eval);
    assert_eq!(code, 0, "{a}");
    let (_, b, _) = run_s(&eval);
    assert_eq!(a, b);
    assert!(a["synthetic_night"]["mmd"].is_number());
    assert!(a["mean_day_night_cosine"].is_number());

    let (code, json, _) = run_s(&args("mmd-report", root_s, run_s_, &["--checkpoint", &adapted]));
    assert_eq!(code, 0);
    assert_eq!(json["report"]["n_a"], 30);

    let img = root.join("test_day").read_dir().unwrap().next().unwrap().unwrap().path();
    let img = img.read_dir().unwrap().next().unwrap().unwrap().path();
    let out = dir.path().join("dark.ppm");
    let (code, json, _) = run_s(&args(
        "darken",
        root_s,
        run_s_,
        &["--input", img.to_str().unwrap(), "--exposure", "0.0", "--checkpoint", &dk, "--output", out.to_str().unwrap()],
    ));
    assert_eq!(code, 0, "{json}");

    // Stop part-way, resume from the state file, and match the full run.
    let (code, json, _) = run_s(&args("adapt", root_s, &format!("{run_s_}/part"), &["--set", &day_set, "--set", &dk_set, "--set", "train.stop_at=1"]));
    assert_eq!(code, 0, "{json}");
    let state = json["state"].as_str().unwrap().to_string();
    let (code, json, _) = run_s(&args(
        "adapt",
        root_s,
        &format!("{run_s_}/part"),
        &["--set", &day_set, "--set", &dk_set, "--set", &format!("paths.resume={state}")],
    ));
    assert_eq!(code, 0, "{json}");
    let whole = std::fs::read(runs.join("adapted.ckpt")).unwrap();
    let resumed = std::fs::read(runs.join("part/adapted.ckpt")).unwrap();
    assert_eq!(whole, resumed);
    assert_eq!(
        std::fs::read_to_string(runs.join("adapt.jsonl")).unwrap(),
        std::fs::read_to_string(runs.join("part/adapt.jsonl")).unwrap()
    );

    let (code, _, _) = run_s(&args("evaluate", root_s, run_s_, &["--checkpoint", &adapted, "--split", "nope"]));
    assert_eq!(code, 2);
}
