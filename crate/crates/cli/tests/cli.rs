use std::path::Path;
use std::process::{Command, Output};

fn fgmoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fgmoe")).args(args).output().unwrap()
}

const SMALL: &[&str] = &[
    "--set", "image_size=32",
    "--set", "encoder.base_channels=8",
    "--set", "channels=16",
    "--set", "moe.hidden=8",
    "--set", "moe.routed=4",
    "--set", "moe.top_k=2",
    "--set", "train_samples=4",
    "--set", "eval_samples=2",
    "--set", "batch_size=2",
    "--set", "steps=2",
    "--set", "log_routing_every=1",
];

fn with_small<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(SMALL.iter().copied()).collect()
}

fn json_lines(out: &[u8]) -> Vec<serde_json::Value> {
    std::str::from_utf8(out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn gen_data_train_eval_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let data = format!("{d}/data");
    let run = format!("{d}/run");

    let out = fgmoe(&with_small(&["gen-data", "--out", &data]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(Path::new(&data).join("train.fgmd").exists());

    let out = fgmoe(&with_small(&["train", "--out", &run, "--data", &data, "--seed", "3"]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = json_lines(&out.stdout);
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["step"], 0);
    assert!(lines[0]["routing"].is_array());
    assert!(lines[2]["census"]["trainable"].as_u64().unwrap() > 0);
    let log = std::fs::read_to_string(Path::new(&run).join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let ck = format!("{run}/checkpoint.fgmc");
    let out = fgmoe(&["eval", "--checkpoint", &ck, "--data", &data]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let eval = &json_lines(&out.stdout)[0];
    assert_eq!(eval, &lines[2]["eval"]);

    let out = fgmoe(&["report", "--run", &run]);
    assert!(out.status.success());
    let r = &json_lines(&out.stdout)[0];
    assert!(r["trainable_fraction"].as_f64().unwrap() < 1.0);
}

#[test]
fn report_prints_config_census() {
    let out = fgmoe(&["report", "--mode", "decoder-only"]);
    assert!(out.status.success());
    let r = &json_lines(&out.stdout)[0];
    assert!(r["trainable_fraction"].as_f64().unwrap() < 0.10);
}

#[test]
fn baselines_enable_delta_m() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let b = dir.path().join("baselines.json");
    std::fs::write(&b, r#"{"seg": 0.5, "depth": 0.3, "normal": 30.0, "bound": 0.4}"#).unwrap();
    let out = fgmoe(&with_small(&[
        "train",
        "--out",
        run.to_str().unwrap(),
        "--baselines",
        b.to_str().unwrap(),
    ]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = json_lines(&out.stdout);
    assert!(lines.last().unwrap()["eval"]["metrics"]["delta_m"].is_f64());
}

#[test]
fn grad_check_passes_on_a_few_probes() {
    let out = fgmoe(&["grad-check", "--samples", "10"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = json_lines(&out.stdout);
    assert_eq!(lines.len(), 11);
    assert_eq!(lines[10]["passed"], true);
}

#[test]
fn bad_arguments_fail_with_messages() {
    let out = fgmoe(&["train", "--set", "bogus=1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
    let out = fgmoe(&["train", "--set", "noequals"]);
    assert!(!out.status.success());
    let out = fgmoe(&["train", "--topk", "9"]);
    assert!(!out.status.success());
    let out = fgmoe(&["eval", "--checkpoint", "/nonexistent/x.fgmc"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/x.fgmc"));
}
