//! The `calm` binary end to end on a tiny configuration: the staged
//! commands, the comparison report and the documented exit codes.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::tempdir;

const TINY: &str = r#"{
  "data": {"n_domain_entities": 20, "n_general_entities": 10, "n_general_eval": 10, "n_declarative_eval": 20},
  "model": {"n_layers": 4, "width": 16, "n_heads": 2, "mlp_hidden": 32, "context_len": 16},
  "train": {"base": {"epochs": 1}, "anchor": {"epochs": 1}, "augment": {"epochs": 1},
            "connector": {"epochs": 1, "batch_size": 4}, "lora": {"epochs": 1, "batch_size": 4}},
  "topology": {"connection": "pairs:(4,2)"},
  "eval": {"seeds": [0]}
}"#;

fn calm(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_calm"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = calm(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn code(out: &Path, args: &[&str]) -> Option<i32> {
    calm(out, args).status.code()
}

#[test]
fn staged_pipeline_and_exit_codes() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("run");
    let config = dir.path().join("tiny.json");
    std::fs::write(&config, TINY).unwrap();
    let config = config.to_str().unwrap();

    ok(&out, &["--config", config, "gen-data"]);
    ok(&out, &["pretrain", "--role", "base"]);
    ok(&out, &["pretrain", "--role", "anchor"]);
    ok(&out, &["pretrain", "--role", "augment"]);

    // a zero-initialized connector passes the gradient check
    let grad = ok(&out, &["gradcheck"]);
    assert!(grad.contains("max relative error"), "{grad}");

    ok(&out, &["compose-train"]);
    ok(&out, &["lora-train"]);
    ok(&out, &["eval"]);
    let table = ok(&out, &["report"]);
    for model in ["anchor", "augment", "lora", "calm"] {
        assert!(
            table.lines().any(|l| l.starts_with(model)),
            "missing {model} row:\n{table}"
        );
    }
    let json: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("reports/comparison.json")).unwrap()).unwrap();
    let rows: Vec<&str> = json["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["model"].as_str().unwrap())
        .collect();
    assert_eq!(rows, ["anchor", "augment", "lora", "calm"]);

    // config errors exit 1
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"model": {"widht": 16}}"#).unwrap();
    assert_eq!(code(&out, &["--config", bad.to_str().unwrap(), "eval"]), Some(1));
    assert_eq!(code(&out, &["--topology", "nonsense", "eval"]), Some(1));
    assert_eq!(code(&out, &["no-such-command"]), Some(1));

    // a corrupted connector checkpoint exits 2
    let connector = out.join("models/connector.ckpt");
    let original = std::fs::read(&connector).unwrap();
    let mut flipped = original.clone();
    let n = flipped.len();
    flipped[n - 12] ^= 0x10;
    std::fs::write(&connector, &flipped).unwrap();
    assert_eq!(code(&out, &["eval", "--model", "calm"]), Some(2));
    std::fs::write(&connector, &original).unwrap();

    // evaluation data regenerated under another seed no longer matches the
    // hash recorded in the checkpoints
    ok(&out, &["--seed", "1", "gen-data"]);
    assert_eq!(code(&out, &["eval", "--model", "anchor"]), Some(2));
}
