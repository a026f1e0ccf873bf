use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3
[generator]
categories = 4
items_per_domain = 96
local_vocab = [30, 30, 30]
users_per_domain = [40, 40, 60]
[encoder]
num_layers = 2
d_model = 8
num_heads = 2
d_ff = 16
max_len = 80
[lora]
rank = 2
[pretrain]
lr = 1e-3
epochs = 1
[source]
lr = 1e-3
epochs = 1
[xcross]
lr = 1e-3
epochs = 1
[experiment]
target_train = 20
"#;

fn xcross(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xcross"))
        .current_dir(dir)
        .env_remove("XCROSS_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = xcross(dir, args);
    assert!(
        out.status.success(),
        "xcross {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn param_report_prints_the_reference_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["param-report", "--n", "2", "--d", "768", "--rank", "16"]);
    assert!(out.contains("6144"), "{out}");
    assert!(out.contains("24576"), "{out}");
    assert!(out.contains("25.00%"), "{out}");
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["grad-check"]);
    assert!(out.contains("PASS") && !out.contains("FAIL"), "{out}");
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tiny_dir();
    let p = dir.path();
    let missing = xcross(p, &["-c", "tiny.toml", "train-xcross"]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("gen-data"));

    let bad = xcross(p, &["-c", "tiny.toml", "--set", "generator.domains=x", "gen-data"]);
    assert_eq!(bad.status.code(), Some(2));
    assert_eq!(xcross(p, &["-c", "absent.toml", "gen-data"]).status.code(), Some(3));
    assert_eq!(xcross(p, &["-c", "tiny.toml", "ablate", "-Heads"]).status.code(), Some(2));

    ok(p, &["-c", "tiny.toml", "gen-data"]);
    assert_eq!(xcross(p, &["-c", "tiny.toml", "gen-data"]).status.code(), Some(2));
    ok(p, &["-c", "tiny.toml", "--overwrite", "gen-data"]);
    let other = xcross(p, &["-c", "tiny.toml", "--seed", "4", "--overwrite", "pretrain"]);
    assert_eq!(other.status.code(), Some(2), "data generated under another seed must be rejected");
}

fn pipeline(p: &Path) -> String {
    for args in [
        &["gen-data"][..],
        &["pretrain"],
        &["train-source", "0"],
        &["train-source", "1"],
        &["select-sources"],
        &["train-xcross"],
        &["ablate", "-Layers"],
    ] {
        let mut full = vec!["-c", "tiny.toml"];
        full.extend_from_slice(args);
        ok(p, &full);
    }
    let eval = ok(p, &["-c", "tiny.toml", "eval", "xcross", "--against", "source-0"]);
    assert!(eval.contains("source-0"), "{eval}");
    assert!(p.join("runs/eval-xcross-2-test/t_test.json").is_file());
    std::fs::read_to_string(p.join("runs/xcross/report.json")).unwrap()
}

#[test]
fn pipeline_is_reproducible_and_writes_every_stage() {
    let (a, b) = (tiny_dir(), tiny_dir());
    let report = pipeline(a.path());
    assert_eq!(report, pipeline(b.path()));
    let runs = a.path().join("runs");
    for stage in ["data", "base", "source-0", "source-1", "selection", "xcross", "ablate-layers", "eval-xcross-2-test"] {
        let d = runs.join(stage);
        assert!(d.join("config.toml").is_file() && d.join("seed").is_file() && d.join("log.txt").is_file(), "{stage}");
    }
    assert_eq!(std::fs::read_to_string(runs.join("xcross/seed")).unwrap().trim(), "3");

    ok(a.path(), &["-c", "tiny.toml", "sweep", "data-efficiency", "--sizes", "10,20", "--subsets", "2"]);
    let csv = std::fs::read_to_string(runs.join("sweep-data-efficiency/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 2);
}
