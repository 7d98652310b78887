use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dynkv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynkv")).args(args).output().expect("spawn dynkv")
}

fn ok(out: &Output) -> &[u8] {
    assert!(out.status.success(), "status {:?}\nstderr: {}", out.status, String::from_utf8_lossy(&out.stderr));
    &out.stdout
}

fn gen(dir: &Path, name: &str, profile: &str, seq_len: usize, seed: u64) -> String {
    let path = dir.join(name).display().to_string();
    let s = seq_len.to_string();
    let seed = seed.to_string();
    ok(&dynkv(&[
        "gen-trace", "--profile", profile, "--layers", "6", "--heads", "4", "--seq-len", &s, "--ws", "32", "--seed",
        &seed, "--out", &path,
    ]));
    path
}

#[test]
fn allocate_uniform_trace_gives_equal_budgets() {
    let dir = tempfile::tempdir().unwrap();
    let trace = gen(dir.path(), "u.kvt", "uniform", 4096, 0);
    let out = dynkv(&["allocate", "--trace", &trace, "--wt", "512", "--ws", "32", "--rmax", "2", "--m", "4"]);
    let doc: serde_json::Value = serde_json::from_slice(ok(&out)).unwrap();
    let budgets: Vec<u64> =
        doc["report"]["per_layer_budget"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert_eq!(budgets, vec![480; 6]);
    assert_eq!(doc["format_version"], "dynkv/1");
    assert_eq!(doc["run_config"]["policy"]["wt"], 512);
    assert_eq!(doc["run_config"]["policy"]["m"], 4);
}

#[test]
fn inspect_rejects_foreign_file() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.bin");
    fs::write(&bad, b"GIF89a not a trace at all").unwrap();
    let out = dynkv(&["inspect", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not a trace file"));
}

#[test]
fn inspect_reports_truncation_and_header() {
    let dir = tempfile::tempdir().unwrap();
    let trace = gen(dir.path(), "n.kvt", "needle-at(100,0.9)", 600, 1);
    let doc: serde_json::Value = serde_json::from_slice(ok(&dynkv(&["inspect", &trace]))).unwrap();
    assert_eq!(doc["header"]["n_layers"], 6);
    assert_eq!(doc["header"]["needle_positions"][0], 100);

    let bytes = fs::read(&trace).unwrap();
    let cut = dir.path().join("cut.kvt");
    fs::write(&cut, &bytes[..bytes.len() - 5]).unwrap();
    let out = dynkv(&["inspect", cut.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("truncated"));
}

#[test]
fn compare_is_byte_identical_and_leaves_inputs_alone() {
    let dir = tempfile::tempdir().unwrap();
    let traces = dir.path().join("traces");
    fs::create_dir(&traces).unwrap();
    gen(&traces, "a.kvt", "early-heavy", 900, 2);
    gen(&traces, "b.kvt", "needle-at(300,0.9)", 900, 3);
    gen(&traces, "c.kvt", "wave", 900, 4);
    let before: Vec<Vec<u8>> = ["a.kvt", "b.kvt", "c.kvt"].iter().map(|f| fs::read(traces.join(f)).unwrap()).collect();
    let t = traces.to_str().unwrap();
    let args = |threads: &'static str| {
        vec!["compare", "--trace-dir", t, "--wt", "96", "--ws", "32", "--threads", threads]
    };
    let first = ok(&dynkv(&args("1"))).to_vec();
    assert_eq!(ok(&dynkv(&args("1"))), first.as_slice());
    assert_eq!(ok(&dynkv(&args("4"))), first.as_slice());
    let after: Vec<Vec<u8>> = ["a.kvt", "b.kvt", "c.kvt"].iter().map(|f| fs::read(traces.join(f)).unwrap()).collect();
    assert_eq!(before, after);

    let text = String::from_utf8(first).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 6);
    assert!(text.lines().skip(1).all(|l| l.starts_with("dynkv/1,")));
}

#[test]
fn config_file_keys_and_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let trace = gen(dir.path(), "w.kvt", "wave", 1000, 5);
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, format!("[policy]\nwt = 128\nws = 32\nm = 2\n\n[run]\ntrace = \"{trace}\"\n")).unwrap();
    let c = cfg.to_str().unwrap();
    let doc: serde_json::Value = serde_json::from_slice(ok(&dynkv(&["--config", c, "allocate"]))).unwrap();
    assert_eq!(doc["run_config"]["policy"]["wt"], 128);
    let total: u64 = doc["report"]["per_layer_budget"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum();
    assert!((96 * 6 - 6..=96 * 6).contains(&total));

    let doc: serde_json::Value =
        serde_json::from_slice(ok(&dynkv(&["--config", c, "allocate", "--wt", "64"]))).unwrap();
    assert_eq!(doc["run_config"]["policy"]["wt"], 64);
    assert_eq!(doc["run_config"]["policy"]["m"], 2);

    fs::write(&cfg, "[policy]\nwt = 128\nwindow_size = 8\n").unwrap();
    let out = dynkv(&["--config", c, "allocate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("window_size"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(dynkv(&["allocate"]).status.code(), Some(1));
    assert_eq!(dynkv(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(dynkv(&["gen-trace", "--profile", "zigzag"]).status.code(), Some(1));
    assert!(dynkv(&["--help"]).status.success());
}

#[test]
fn simulate_and_profile_write_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dynkv(&[
        "simulate", "--policy", "dynamic", "--wt", "64", "--ws", "16", "--prompt-len", "200", "--model-layers", "4",
    ]);
    let doc: serde_json::Value = serde_json::from_slice(ok(&out)).unwrap();
    assert_eq!(doc["report"]["policy"], "dynamic");
    assert_eq!(doc["run_config"]["model"]["n_layers"], 4);
    assert!(doc["report"]["logit_max_abs_diff"].is_number());

    let full = dynkv(&["simulate", "--policy", "full", "--prompt-len", "100", "--model-layers", "2"]);
    let doc: serde_json::Value = serde_json::from_slice(ok(&full)).unwrap();
    assert_eq!(doc["report"]["logit_max_abs_diff"], 0.0);

    let a = gen(dir.path(), "a.kvt", "early-heavy", 800, 0);
    let b = gen(dir.path(), "b.kvt", "early-heavy", 800, 1);
    let csv = String::from_utf8(ok(&dynkv(&["profile", "--trace", &a, "--trace", &b, "--per-layer-k", "64"])).to_vec())
        .unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 6 + 6);
    assert!(csv.lines().nth(1).unwrap().starts_with("dynkv/1,64,"));

    let m = dir.path().join("m.kvt");
    ok(&dynkv(&["gen-trace", "--from-model", "--prompt-len", "120", "--model-layers", "3", "--ws", "16", "-o", m.to_str().unwrap()]));
    let doc: serde_json::Value = serde_json::from_slice(ok(&dynkv(&["inspect", m.to_str().unwrap()]))).unwrap();
    assert_eq!(doc["header"]["n_layers"], 3);
    assert_eq!(doc["header"]["seq_len"], 120);
}
