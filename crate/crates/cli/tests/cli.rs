use std::path::Path;
use std::process::{Command, Output};

use echo_core::harness::checkpoint::{load_checkpoint, read_header, Mode};
use echo_core::harness::metrics::read_metrics;

const TINY: &str = r#"{
  "hidden_size": 16,
  "intermediate_size": 32,
  "num_hidden_layers": 12,
  "num_attention_heads": 2,
  "vocab_size": 258,
  "max_position_embeddings": 64
}"#;

fn echo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_echo"))
        .args(args)
        .env_remove("ECHO_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = echo(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup(dir: &Path) -> (String, String, String) {
    let cfg = dir.join("cfg.json");
    std::fs::write(&cfg, TINY).unwrap();
    let model = dir.join("m.eck");
    let corpus = dir.join("corpus.txt");
    let p = |p: &Path| p.to_str().unwrap().to_string();
    ok(&[
        "init",
        "--config",
        &p(&cfg),
        "--seed",
        "3",
        "--out",
        &p(&model),
    ]);
    ok(&[
        "synth-corpus",
        "--bytes",
        "4000",
        "--seed",
        "1",
        "--out",
        &p(&corpus),
    ]);
    (p(&cfg), p(&model), p(&corpus))
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = echo(&["memory-report", "--config", "desk", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(echo(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_one_with_a_message() {
    let out = echo(&[
        "bench",
        "--model",
        "/nonexistent/m.eck",
        "--mode",
        "prefill",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn memory_report_prints_the_cache_ratio() {
    let out = ok(&[
        "memory-report",
        "--config",
        "llama-125m",
        "--shared-fraction",
        "0.5",
        "--batch",
        "1",
        "--seq",
        "2048",
    ]);
    assert!(out.lines().any(|l| l == "cache_ratio 0.583333"), "{out}");
    let base = ok(&["memory-report", "--config", "llama-125m"]);
    assert!(base.lines().any(|l| l == "cache_ratio 1.000000"), "{base}");
}

#[test]
fn memory_report_csv_has_the_report_fields() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mem.csv");
    ok(&[
        "memory-report",
        "--config",
        "desk",
        "--shared-fraction",
        "0.25",
        "--metrics",
        path.to_str().unwrap(),
    ]);
    let mut r = csv::Reader::from_path(&path).unwrap();
    let headers = r.headers().unwrap().clone();
    let row = r.records().next().unwrap().unwrap();
    let get = |k: &str| {
        row.get(headers.iter().position(|h| h == k).unwrap())
            .unwrap()
            .to_string()
    };
    assert_eq!(get("self_layers"), "9");
    assert_eq!(get("cache_ratio").parse::<f64>().unwrap(), 10.0 / 12.0);
}

#[test]
fn init_writes_a_baseline_checkpoint_and_honours_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, model, _) = setup(dir.path());
    let bytes = std::fs::read(&model).unwrap();
    let (header, _) = read_header(&bytes).unwrap();
    assert_eq!(header.mode, Mode::Baseline);
    assert_eq!(load_checkpoint(&model).unwrap().config.seed, 3);

    let other = dir.path().join("o.eck");
    let out = Command::new(env!("CARGO_BIN_EXE_echo"))
        .args([
            "init",
            "--config",
            &cfg,
            "--seed",
            "3",
            "--out",
            other.to_str().unwrap(),
        ])
        .env("ECHO_SEED", "9")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(load_checkpoint(&other).unwrap().config.seed, 9);
}

#[test]
fn adapt_converts_floor_p_l_layers_and_logs_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model, corpus) = setup(dir.path());
    let out_model = dir.path().join("a.eck");
    let metrics = dir.path().join("a.csv");
    let out = ok(&[
        "adapt",
        "--model",
        &model,
        "--corpus",
        &corpus,
        "--shared-fraction",
        "0.25",
        "--steps-per-stage",
        "2",
        "--batch",
        "2",
        "--seq-len",
        "17",
        "--final-tokens",
        "64",
        "--out",
        out_model.to_str().unwrap(),
        "--metrics",
        metrics.to_str().unwrap(),
        "--run-id",
        "t",
    ]);
    assert!(out.contains("converted 3 of 12 layers"), "{out}");
    let m = load_checkpoint(&out_model).unwrap();
    assert_eq!(m.n_self_layers(), 9);
    let rows = read_metrics(&metrics).unwrap();
    let phases: Vec<&str> = rows.iter().map(|r| r.phase.as_str()).collect();
    assert_eq!(
        &phases[..6],
        ["stage-1", "stage-1", "stage-2", "stage-2", "stage-3", "stage-3"]
    );
    assert!(phases[6..].iter().all(|&p| p == "final"));
    assert!(rows.iter().all(|r| r.run_id == "t" && r.loss.is_some()));
}

#[test]
fn too_large_shared_fraction_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model, corpus) = setup(dir.path());
    let out = echo(&[
        "adapt",
        "--model",
        &model,
        "--corpus",
        &corpus,
        "--shared-fraction",
        "0.75",
        "--out",
        dir.path().join("x.eck").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bench_decode_and_ablation_emit_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model, corpus) = setup(dir.path());
    let csv = dir.path().join("b.csv");
    let c = csv.to_str().unwrap();

    let out = ok(&[
        "bench",
        "--model",
        &model,
        "--mode",
        "train",
        "--seq",
        "8",
        "--steps",
        "3",
        "--metrics",
        c,
    ]);
    assert!(out.contains("--peak-flops"));
    let rows = read_metrics(&csv).unwrap();
    assert_eq!(
        (rows.len(), rows[0].phase.as_str(), rows[0].mfu_percent),
        (1, "bench", None)
    );

    ok(&[
        "bench",
        "--model",
        &model,
        "--mode",
        "decode",
        "--seq",
        "8",
        "--steps",
        "3",
        "--peak-flops",
        "1e12",
        "--metrics",
        c,
    ]);
    assert!(read_metrics(&csv).unwrap()[0].mfu_percent.unwrap() > 0.0);

    let text = ok(&[
        "decode",
        "--model",
        &model,
        "--prompt",
        "ab",
        "--max-new",
        "5",
        "--metrics",
        c,
    ]);
    assert!(text.starts_with("ab"));
    assert!(read_metrics(&csv).unwrap()[0].step <= 5);

    ok(&[
        "pretrain",
        "--model",
        &model,
        "--corpus",
        &corpus,
        "--steps",
        "2",
        "--batch",
        "2",
        "--seq-len",
        "17",
        "--metrics",
        c,
    ]);
    assert_eq!(read_metrics(&csv).unwrap().len(), 2);

    ok(&[
        "ablate-steps",
        "--model",
        &model,
        "--corpus",
        &corpus,
        "--layer",
        "12",
        "--grid",
        "1,3",
        "--batch",
        "2",
        "--seq-len",
        "17",
        "--metrics",
        c,
    ]);
    let rows = read_metrics(&csv).unwrap();
    assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 3]);
    assert!(rows.iter().all(|r| r.phase == "ablate"));
}
