use std::collections::BTreeSet;
use std::fs;
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use s3rec::dataio::{self, SynthConfig};
use s3rec_cli::commands::bench::CSV_HEADER;
use serde_json::Value;
use tempfile::TempDir;

fn s3rec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_s3rec"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn s3rec")
}

fn ok(args: &[&str]) -> String {
    let out = s3rec(args);
    assert!(out.status.success(), "s3rec {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// Generates the default synthetic dataset into `dir`.
fn gen_data(dir: &Path) {
    ok(&["gen-data", "--seed", "4", "--out-dir", path(dir)]);
}

fn jsonl(p: &Path) -> Vec<Value> {
    fs::read_to_string(p).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn model_body(p: &Path) -> String {
    fs::read_to_string(p).unwrap().lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join("\n")
}

fn free_addr() -> String {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    l.local_addr().unwrap().to_string()
}

/// `train` arguments on a generated dataset; every user survives filtering.
fn train_args<'a>(data: &'a Path, out: &'a Path, extra: &[&'a str]) -> Vec<String> {
    let mut v: Vec<String> = vec![
        "train".into(),
        "--ratings".into(),
        data.join("ratings.tsv").display().to_string(),
        "--social".into(),
        data.join("social.tsv").display().to_string(),
        "--out-dir".into(),
        out.display().to_string(),
        "--set".into(),
        "min_interactions=0".into(),
    ];
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

fn run_train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let args = train_args(data, out, extra);
    s3rec(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

const SMALL_KEYS: [&str; 4] = ["--set", "ahe_bits=1024", "--set", "insecure_test_keys=true"];

#[test]
fn gen_data_is_deterministic_and_reloads_losslessly() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen_data(&a);
    gen_data(&b);
    for f in ["ratings.tsv", "social.tsv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let (expected, expected_social) = dataio::synth(&SynthConfig { seed: 4, ..SynthConfig::default() }).unwrap();
    let (loaded, social) = dataio::load(&a.join("ratings.tsv"), &a.join("social.tsv"), 0).unwrap();
    let keyed = |d: &dataio::RatingDataset| -> BTreeSet<(String, String, u64)> {
        d.ratings.iter().map(|&(u, i, r)| (d.user_ids[u].clone(), d.item_ids[i].clone(), r.to_bits())).collect()
    };
    assert_eq!(keyed(&loaded), keyed(&expected));
    assert_eq!(social.nnz(), expected_social.nnz());
}

#[test]
fn gen_data_writes_a_sampled_graph_and_rejects_bad_rates() {
    let tmp = TempDir::new().unwrap();
    let stdout = ok(&["gen-data", "--sample-rate", "0.5", "--out-dir", path(tmp.path())]);
    assert!(stdout.contains("social_sampled"), "{stdout}");
    let out = s3rec(&["gen-data", "--sample-rate", "1.7", "--out-dir", path(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("sampling rate"), "{}", stderr(&out));
}

#[test]
fn dealer_writes_and_checks_triple_stores() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("t");
    let stdout = ok(&["dealer", "--count", "100", "--seed", "3", "--out-dir", path(&dir)]);
    assert!(stdout.contains("offline_bytes_per_party = 2400"), "{stdout}");
    assert!(ok(&["dealer", "--check", "--out-dir", path(&dir)]).contains("triples = 100"));

    let empty = tmp.path().join("empty");
    ok(&["dealer", "--count", "0", "--out-dir", path(&empty)]);
    assert!(ok(&["dealer", "--check", "--out-dir", path(&empty)]).contains("triples = 0"));
}

#[test]
fn dealer_sizing_names_the_requirement() {
    let tmp = TempDir::new().unwrap();
    let out = s3rec(&[
        "dealer", "--protocol", "dense", "--k", "10", "--m", "100", "--count", "5", "--out-dir", path(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("100000"), "{}", stderr(&out));
    let stdout = ok(&["dealer", "--protocol", "train", "--k", "3", "--m", "7", "--epochs", "2", "--out-dir", path(tmp.path())]);
    assert!(stdout.contains("triples = 42"), "{stdout}");
}

#[test]
fn keygen_refuses_small_moduli_without_the_test_flag() {
    let tmp = TempDir::new().unwrap();
    let out = s3rec(&["keygen", "--bits", "512", "--out-dir", path(tmp.path())]);
    assert!(!out.status.success());
    ok(&["keygen", "--bits", "512", "--insecure-test-keys", "--name", "t", "--out-dir", path(tmp.path())]);
    assert!(tmp.path().join("t.key").exists() && tmp.path().join("t.pub").exists());
}

#[test]
fn soreg_training_writes_one_record_per_epoch_and_reruns_identically() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data);
    let out = tmp.path().join("out");
    let extra = ["--mode", "soreg", "--set", "epochs=25", "--set", "k=3"];
    let run = run_train(&data, &out, &extra);
    assert!(run.status.success(), "{}", stderr(&run));
    let records = jsonl(&out.join("metrics.jsonl"));
    assert_eq!(records.len(), 27);
    assert_eq!(records[0]["record"], "config");
    assert_eq!(records[0]["config"]["mode"], "soreg");
    let epochs: Vec<&Value> = records.iter().filter(|r| r["record"] == "epoch").collect();
    assert_eq!(epochs.len(), 25);
    for (i, e) in epochs.iter().enumerate() {
        assert_eq!(e["epoch"], i);
        assert!(e["objective"].as_f64().unwrap().is_finite());
    }
    let summary = records.last().unwrap();
    assert_eq!(summary["record"], "summary");
    assert_eq!(summary["epochs"], 25);

    let metrics = fs::read(out.join("metrics.jsonl")).unwrap();
    let model = fs::read(out.join("model.tsv")).unwrap();
    let rerun = run_train(&data, &out, &extra);
    assert!(rerun.status.success());
    assert_eq!(fs::read(out.join("metrics.jsonl")).unwrap(), metrics);
    assert_eq!(fs::read(out.join("model.tsv")).unwrap(), model);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data);
    let out = run_train(&data, &tmp.path().join("out"), &["--set", "learning_rate=0.1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));

    let conf = tmp.path().join("bad.conf");
    fs::write(&conf, "k = 4\n\nnot a pair\n").unwrap();
    let conf_arg = conf.display().to_string();
    let out = run_train(&data, &tmp.path().join("out"), &["--config", &conf_arg]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));
}

#[test]
fn secure_inproc_training_tracks_the_plaintext_social_term() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data);
    let out = tmp.path().join("out");
    let mut extra = vec!["--mode", "s3rec", "--set", "epochs=3", "--set", "k=3"];
    extra.extend(SMALL_KEYS);
    let run = run_train(&data, &out, &extra);
    assert!(run.status.success(), "{}", stderr(&run));
    let records = jsonl(&out.join("metrics.jsonl"));
    let summary = records.last().unwrap();
    assert_eq!(summary["mode"], "s3rec");
    let dev = summary["final_social_deviation"].as_f64().expect("audited run");
    assert!(dev < 1e-3, "deviation {dev}");
}

#[test]
fn lone_party_reports_a_transport_error() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data);
    let addr = format!("addr={}", free_addr());
    let out = run_train(
        &data,
        &tmp.path().join("out"),
        &["--mode", "s3rec", "--transport", "tcp", "--party", "0", "--set", &addr, "--set", "connect_timeout_ms=300"],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("transport error"), "{}", stderr(&out));
}

#[test]
fn two_process_tcp_training_matches_inproc() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data);
    let mut common = vec!["--mode", "s3rec", "--set", "epochs=2", "--set", "k=2"];
    common.extend(SMALL_KEYS);

    let inproc = tmp.path().join("inproc");
    let run = run_train(&data, &inproc, &common);
    assert!(run.status.success(), "{}", stderr(&run));

    let addr = format!("addr={}", free_addr());
    let mut tcp = common.clone();
    tcp.extend(["--transport", "tcp", "--set", &addr, "--set", "connect_timeout_ms=20000"]);
    let p1_args = {
        let mut a = tcp.clone();
        a.extend(["--party", "1"]);
        train_args(&data, &tmp.path().join("p1"), &a)
    };
    let p1 = Command::new(env!("CARGO_BIN_EXE_s3rec")).args(&p1_args).env("RUST_LOG", "warn").stdout(Stdio::null()).spawn().unwrap();
    let mut p0_args = tcp.clone();
    p0_args.extend(["--party", "0"]);
    let p0 = run_train(&data, &tmp.path().join("p0"), &p0_args);
    let p1 = p1.wait_with_output().unwrap();
    assert!(p0.status.success(), "P0: {}", stderr(&p0));
    assert!(p1.status.success(), "P1 exited with {:?}", p1.status);
    assert_eq!(model_body(&tmp.path().join("p0/model.tsv")), model_body(&inproc.join("model.tsv")));
    assert_eq!(jsonl(&tmp.path().join("p1/p1_reports.jsonl")).len(), 1 + 2);
}

#[test]
fn bench_rows_match_their_predictions() {
    let tmp = TempDir::new().unwrap();
    let csv = tmp.path().join("bench.csv");
    ok(&[
        "bench", "--grid", "protocols", "--m", "10", "--k", "2", "--ahe-bits", "1024", "--insecure-test-keys", "--out",
        path(&csv),
    ]);
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines().skip_while(|l| l.starts_with('#'));
    assert_eq!(lines.next(), Some(CSV_HEADER));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert!(rows.len() >= 4, "{text}");
    for r in &rows {
        assert_eq!(r[5], r[6], "measured != predicted in {r:?}");
    }
    let protocols: BTreeSet<&str> = rows.iter().map(|r| r[0]).collect();
    assert!(protocols.contains("dense") && protocols.contains("insensitive") && protocols.contains("sensitive"));
}

#[test]
fn bundled_dataset_regenerates_byte_for_byte() {
    let bundled = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/synth");
    let tmp = TempDir::new().unwrap();
    ok(&[
        "gen-data", "--m", "100", "--n", "100", "--rating-density", "0.05", "--alpha", "0.05", "--blend", "0.9",
        "--seed", "0", "--out-dir", path(tmp.path()),
    ]);
    for f in ["ratings.tsv", "social.tsv"] {
        assert_eq!(fs::read(tmp.path().join(f)).unwrap(), fs::read(bundled.join(f)).unwrap(), "{f}");
    }
}
