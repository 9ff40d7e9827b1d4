use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{"epochs": 2, "encoder": {"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ffn": 32, "max_len": 16}}"#;

fn loid(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_loid"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn loid")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = loid(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    loid(dir, args).status.code().expect("exit code")
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn json(dir: &Path, name: &str) -> serde_json::Value {
    serde_json::from_slice(&read(dir, name)).unwrap()
}

/// Synthetic corpus, tiny config and a shared base encoder.
fn fixture() -> tempfile::TempDir {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    std::fs::write(d.join("tiny.json"), TINY).unwrap();
    ok(d, &["gen-synth", "--out", "syn", "--seed", "3", "--n", "120"]);
    ok(d, &["init-base", "--data", "syn/src.jsonl,syn/tgt.jsonl", "--config", "tiny.json", "--seed", "1", "--out", "base.loid"]);
    t
}

fn pretrain(d: &Path, out: &str) {
    ok(d, &["pretrain", "--data", "syn/src.jsonl", "--base", "base.loid", "--config", "tiny.json", "--seed", "1", "--out", out]);
}

fn train(d: &Path, out: &str, extra: &[&str]) {
    let mut args = vec!["train", "--data", "syn/tgt.jsonl", "--base", "base.loid", "--config", "tiny.json", "--seed", "1", "--out", out];
    args.extend_from_slice(extra);
    ok(d, &args);
}

fn printed_mse(stdout: &str) -> f64 {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix("mse "))
        .expect("mse line")
        .parse()
        .unwrap()
}

#[test]
fn pretrain_writes_artifacts_with_matching_checksums() {
    let t = fixture();
    let d = t.path();
    pretrain(d, "src.loid");
    for f in ["src.loid", "src.loid.log.csv", "src.loid.manifest.json"] {
        assert!(d.join(f).exists(), "{f}");
    }
    let m = json(d, "src.loid.manifest.json");
    assert_eq!(m["command"], "pretrain");
    assert_eq!(m["seed"], 1);
    assert!(m["git_describe"].as_str().is_some_and(|s| !s.is_empty()));
    let inputs = m["inputs"].as_array().unwrap();
    for name in ["tiny.json", "syn/src.jsonl", "base.loid", "base.loid.vocab"] {
        let entry = inputs.iter().find(|x| x["path"] == name).unwrap_or_else(|| panic!("{name} not recorded"));
        assert_eq!(entry["sha256"], loid::tensor::sha256_hex(&read(d, name)), "{name}");
    }
    assert_eq!(m["config"]["seed"], 1);
    assert_eq!(m["config"]["encoder"]["d_model"], 16);
}

#[test]
fn pretrain_reruns_are_byte_identical() {
    let t = fixture();
    let d = t.path();
    pretrain(d, "a.loid");
    pretrain(d, "b.loid");
    assert_eq!(read(d, "a.loid"), read(d, "b.loid"));
    assert_eq!(read(d, "a.loid.log.csv"), read(d, "b.loid.log.csv"));
}

#[test]
fn pretrain_without_base_initializes_one() {
    let t = fixture();
    let d = t.path();
    ok(d, &["pretrain", "--data", "syn/src.jsonl", "--config", "tiny.json", "--seed", "1", "--out", "src.loid"]);
    assert!(d.join("src.loid.base.loid").exists());
    assert!(d.join("src.loid.base.loid.vocab").exists());
}

#[test]
fn missing_data_is_a_usage_error() {
    let t = tempfile::tempdir().unwrap();
    let out = loid(t.path(), &["pretrain", "--config", "desk.json", "--out", "x.loid"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn bad_config_values_exit_2_and_bad_data_exits_3() {
    let t = fixture();
    let d = t.path();
    let args = ["train", "--data", "syn/tgt.jsonl", "--base", "base.loid", "--config", "tiny.json", "--out", "m.loid"];
    let mut with = args.to_vec();
    with.extend(["--lambda", "2"]);
    assert_eq!(code(d, &with), 2);
    std::fs::write(d.join("typo.json"), r#"{"lamda": 0.3}"#).unwrap();
    assert_eq!(code(d, &["train", "--data", "syn/tgt.jsonl", "--base", "base.loid", "--config", "typo.json", "--out", "m.loid"]), 2);
    std::fs::write(d.join("bad.jsonl"), "{\"reviewerID\": \"u\"}\n").unwrap();
    assert_eq!(code(d, &["train", "--data", "bad.jsonl", "--base", "base.loid", "--config", "tiny.json", "--out", "m.loid"]), 3);
    assert_eq!(code(d, &["train", "--data", "absent.jsonl", "--base", "base.loid", "--out", "m.loid"]), 3);
}

#[test]
fn empty_merge_copies_the_base() {
    let t = fixture();
    let d = t.path();
    ok(d, &["merge", "--base", "base.loid", "--adapters", "", "--out", "same.loid"]);
    assert_eq!(read(d, "same.loid"), read(d, "base.loid"));
    assert_eq!(read(d, "same.loid.vocab"), read(d, "base.loid.vocab"));
}

#[test]
fn merge_is_seeded_and_checks_its_inputs() {
    let t = fixture();
    let d = t.path();
    pretrain(d, "src.loid");
    let merge = |out: &str, seed: &str| ok(d, &["merge", "--base", "base.loid", "--adapters", "src.loid", "--p", "0.9", "--seed", seed, "--out", out]);
    merge("m1.loid", "4");
    merge("m2.loid", "4");
    merge("m3.loid", "5");
    assert_eq!(read(d, "m1.loid"), read(d, "m2.loid"));
    assert_ne!(read(d, "m1.loid"), read(d, "m3.loid"));
    assert_ne!(read(d, "m1.loid"), read(d, "base.loid"));
    assert_eq!(code(d, &["merge", "--base", "base.loid", "--adapters", "src.loid", "--p", "1.0", "--out", "x.loid"]), 2);
    let mut bytes = read(d, "src.loid");
    bytes.truncate(bytes.len() - 7);
    std::fs::write(d.join("cut.loid"), bytes).unwrap();
    assert_eq!(code(d, &["merge", "--base", "base.loid", "--adapters", "cut.loid", "--out", "x.loid"]), 3);
    assert!(!d.join("x.loid").exists());
}

#[test]
fn no_cl_logs_zero_contrastive_loss_and_changes_the_model() {
    let t = fixture();
    let d = t.path();
    train(d, "cl.loid", &[]);
    train(d, "plain.loid", &["--no-cl"]);
    let mut rdr = csv::Reader::from_path(d.join("plain.loid.log.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    assert_eq!(headers.iter().collect::<Vec<_>>(), ["epoch", "step", "l_rec", "l_cl", "total", "val_mse"]);
    let mut rows = 0;
    for r in rdr.records() {
        let r = r.unwrap();
        assert_eq!(r[3].parse::<f64>().unwrap(), 0.0);
        assert_eq!(r[2], r[4]);
        rows += 1;
    }
    assert!(rows > 0);
    let cl = csv::Reader::from_path(d.join("cl.loid.log.csv")).unwrap().into_records();
    assert!(cl.map(|r| r.unwrap()[3].parse::<f64>().unwrap()).any(|x| x > 0.0));
    assert_ne!(read(d, "cl.loid"), read(d, "plain.loid"));
}

#[test]
fn eval_is_deterministic_and_recomputable_from_predictions() {
    let t = fixture();
    let d = t.path();
    train(d, "m.loid", &[]);
    let args = |out: &str| {
        ["eval", "--data", "syn/tgt.jsonl", "--base", "base.loid", "--model", "m.loid", "--repeats", "1", "--seed", "7", "--out"]
            .iter()
            .map(|s| s.to_string())
            .chain([out.to_string()])
            .collect::<Vec<_>>()
    };
    let run = |out: &str| {
        let a = args(out);
        ok(d, &a.iter().map(String::as_str).collect::<Vec<_>>())
    };
    let first = run("p1.csv");
    let second = run("p2.csv");
    assert_eq!(printed_mse(&first), printed_mse(&second));
    assert_eq!(read(d, "p1.csv"), read(d, "p2.csv"));

    let three = ok(d, &["eval", "--data", "syn/tgt.jsonl", "--base", "base.loid", "--model", "m.loid", "--repeats", "3", "--seed", "7", "--out", "p3.csv"]);
    let mut per_repeat: Vec<(f64, usize)> = Vec::new();
    for r in csv::Reader::from_path(d.join("p3.csv")).unwrap().records() {
        let r = r.unwrap();
        let repeat: usize = r[0].parse().unwrap();
        let (rating, raw): (f64, f64) = (r[4].parse().unwrap(), r[5].parse().unwrap());
        if per_repeat.len() <= repeat {
            per_repeat.resize(repeat + 1, (0.0, 0));
        }
        per_repeat[repeat].0 += (raw - rating) * (raw - rating);
        per_repeat[repeat].1 += 1;
    }
    assert_eq!(per_repeat.len(), 3);
    let mses: Vec<f64> = per_repeat.iter().map(|(s, n)| s / *n as f64).collect();
    let recomputed = mses.iter().sum::<f64>() / mses.len() as f64;
    assert_eq!(recomputed, printed_mse(&three));
}

#[test]
fn eval_rejects_damaged_checkpoints() {
    let t = fixture();
    let d = t.path();
    train(d, "m.loid", &[]);
    let eval = |model: &str| code(d, &["eval", "--data", "syn/tgt.jsonl", "--base", "base.loid", "--model", model, "--repeats", "1"]);
    assert_eq!(eval("m.loid"), 0);
    let bytes = read(d, "m.loid");
    std::fs::write(d.join("cut.loid"), &bytes[..bytes.len() / 2]).unwrap();
    std::fs::copy(d.join("m.loid.meta.json"), d.join("cut.loid.meta.json")).unwrap();
    assert_eq!(eval("cut.loid"), 3);
    assert_eq!(eval("absent.loid"), 3);

    let mut f = loid::format::TensorFile::load(&d.join("m.loid")).unwrap();
    f.tensors.retain(|x| x.name != "ids.item");
    f.save(&d.join("holey.loid")).unwrap();
    std::fs::copy(d.join("m.loid.meta.json"), d.join("holey.loid.meta.json")).unwrap();
    let out = loid(d, &["eval", "--data", "syn/tgt.jsonl", "--base", "base.loid", "--model", "holey.loid"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ids.item"));
}

#[test]
fn domain_similarity_of_a_domain_with_itself_is_one() {
    let t = fixture();
    let d = t.path();
    let out = ok(d, &["domain-sim", "--data", "syn/tgt.jsonl,syn/tgt.jsonl", "--base", "base.loid", "--n", "100"]);
    let row = out.lines().nth(1).unwrap();
    let sim: f64 = row.split(',').nth(3).unwrap().parse().unwrap();
    assert_eq!(format!("{sim:.2}"), "1.00");
    assert_eq!(code(d, &["domain-sim", "--data", "syn/tgt.jsonl,syn/src.jsonl", "--base", "base.loid", "--n", "121"]), 3);
    assert_eq!(code(d, &["domain-sim", "--data", "syn/tgt.jsonl", "--base", "base.loid"]), 2);
}

#[test]
fn domain_similarity_report_has_the_correlation_table_columns() {
    let t = fixture();
    let d = t.path();
    ok(d, &["transfer", "--data", "syn/tgt.jsonl", "--sources", "syn/src.jsonl", "--base", "base.loid", "--config", "tiny.json", "--repeats", "1", "--out", "transfer.json"]);
    let report = json(d, "transfer.json");
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["sources"].as_array().unwrap().len(), 0);
    assert_eq!(rows[1]["sources"][0], "src");
    ok(d, &["domain-sim", "--data", "syn/tgt.jsonl,syn/src.jsonl", "--base", "base.loid", "--n", "50", "--report", "transfer.json", "--out", "sim.csv"]);
    let mut rdr = csv::Reader::from_path(d.join("sim.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), ["target", "source", "n", "sim", "mse", "improvement_pct"]);
    let r = rdr.records().next().unwrap().unwrap();
    let (base, merged) = (rows[0]["test_mse"].as_f64().unwrap(), rows[1]["test_mse"].as_f64().unwrap());
    assert_eq!(r[4].parse::<f64>().unwrap(), merged);
    let pct: f64 = r[5].parse().unwrap();
    assert!((pct - 100.0 * (base - merged) / base).abs() < 1e-9);
    assert!(d.join("sim.csv.manifest.json").exists());
}

#[test]
fn gen_synth_is_seeded() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(d, &["gen-synth", "--out", "a", "--seed", "9", "--n", "50"]);
    ok(d, &["gen-synth", "--out", "b", "--seed", "9", "--n", "50"]);
    ok(d, &["gen-synth", "--out", "c", "--seed", "10", "--n", "50"]);
    for f in ["src.jsonl", "tgt.jsonl", "synth.json"] {
        assert_eq!(read(d, &format!("a/{f}")), read(d, &format!("b/{f}")), "{f}");
    }
    assert_ne!(read(d, "a/src.jsonl"), read(d, "c/src.jsonl"));
    let spec = json(d, "a/synth.json");
    assert_eq!(spec["seed"], 9);
    assert_eq!(spec["n_interactions"], 50);
    assert!(d.join("a/synth.json.manifest.json").exists());
}

#[test]
fn manifest_replay_reproduces_artifacts() {
    let t = fixture();
    let d = t.path();
    train(d, "m.loid", &[]);
    let m = json(d, "m.loid.manifest.json");
    let argv: Vec<String> = m["argv"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect();
    let before: Vec<Vec<u8>> = ["m.loid", "m.loid.meta.json", "m.loid.log.csv", "m.loid.split.json"].iter().map(|f| read(d, f)).collect();
    let args: Vec<&str> = argv[1..].iter().map(String::as_str).collect();
    ok(d, &args);
    let after: Vec<Vec<u8>> = ["m.loid", "m.loid.meta.json", "m.loid.log.csv", "m.loid.split.json"].iter().map(|f| read(d, f)).collect();
    assert_eq!(before, after);
    let artifacts: Vec<PathBuf> = m["artifacts"].as_array().unwrap().iter().map(|v| PathBuf::from(v.as_str().unwrap())).collect();
    assert!(artifacts.iter().all(|p| d.join(p).exists()));
}
