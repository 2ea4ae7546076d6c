use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spikerpe"))
        .args(["--log", "warn"])
        .args(args)
        .env("SPIKERPE_OUT", out)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = r#"
seed = 1

[task]
kind = "offset-copy"
len = 8
vocab = 4
offset = 1
train_samples = 32
val_samples = 16

[model]
pe = "gray"
d_model = 8
d_ffn = 8
blocks = 1
steps = 2

[train]
epochs = 2
batch_size = 16
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("exp.toml");
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn verify_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["verify", "theorem1"]);
    assert_eq!(o.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("verify-theorem1.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["suites"][0]["checks"][0]["detail"]["pairs_checked"], 45057);
}

#[test]
fn mutated_gray_encoder_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["verify", "all", "--mutate-gray"]);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    assert!(text.contains("counterexample [theorem1"), "{text}");
    assert!(text.contains("counterexample [attention / gray-pe decomposition]"), "{text}");
}

#[test]
fn dump_gray_words() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["dump-pe", "gray", "--bits", "3", "--length", "5"]);
    assert_eq!(stdout(&o), "index,gray_bits\n0,000\n1,001\n2,011\n3,010\n4,110\n");
    let o = run(dir.path(), &["dump-pe", "gray-term", "--length", "4", "--bits", "2"]);
    assert_eq!(stdout(&o), "2,1,0,1\n1,2,1,0\n0,1,2,1\n1,0,1,2\n");
    let o = run(dir.path(), &["dump-pe", "gray", "--bits", "2", "--length", "5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn dump_log_bias() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["dump-pe", "log", "--length", "4"]);
    assert_eq!(stdout(&o), "2,1,0,0\n1,2,1,0\n0,1,2,1\n0,0,1,2\n");
}

#[test]
fn train_writes_metrics_and_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = run(dir.path(), &["train", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("final gray seed=1 "));
    let run_dir = fs::read_dir(dir.path().join("runs")).unwrap().next().unwrap().unwrap().path();
    let metrics = fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert_eq!(&fs::read(run_dir.join("weights.spkr")).unwrap()[..4], b"SPKR");
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let no_seed = write_config(dir.path(), &SMALL.replace("seed = 1\n", ""));
    assert_eq!(run(dir.path(), &["train", &no_seed]).status.code(), Some(2));
    let unknown = write_config(dir.path(), &SMALL.replace("blocks = 1", "blocks = 1\nwidth = 3"));
    assert_eq!(run(dir.path(), &["train", &unknown]).status.code(), Some(2));
    let cfg = write_config(dir.path(), SMALL);
    assert_eq!(run(dir.path(), &["compare", &cfg, "--variants", "gray"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["compare", &cfg, "--variants", "gray,sideways"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_three_and_compare_records_it() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("batch_size = 16", "batch_size = 16\nlr = 1e308").replace("pe = \"gray\"", "pe = \"crpe\"");
    let cfg = write_config(dir.path(), &text);
    let o = run(dir.path(), &["train", &cfg]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(dir.path(), &["compare", &cfg, "--variants", "crpe,none", "--csv"]);
    assert_eq!(o.status.code(), Some(0));
    let csv = stdout(&o);
    assert!(csv.contains("\ncrpe,1,,,\n"), "{csv}");
}

#[test]
fn lut_build_and_check() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("log2.lut");
    let t = table.to_string_lossy();
    let o = run(dir.path(), &["lut", "build", "--n", "9", "--k", "1", "--p", "11", "--out", &t]);
    assert_eq!(o.status.code(), Some(0));
    assert!(!fs::read(&table).unwrap().is_empty());
    let o = run(dir.path(), &["lut", "check", "--length-max", "512", "--table", &t]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("mismatches=0"));
    run(dir.path(), &["lut", "build", "--n", "9", "--k", "1", "--p", "5", "--out", &t]);
    let o = run(dir.path(), &["lut", "check", "--length-max", "512", "--table", &t]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bench_reports_four_schemes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["bench", "--sizes", "16"]);
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for (row, name) in rows.iter().zip(["dot", "xnor", "gray", "log"]) {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[0], name);
        assert!(cols[4].parse::<f64>().unwrap() > 0.0);
    }
}
