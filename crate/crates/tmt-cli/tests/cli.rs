//! End-to-end tests that drive the compiled `tmt` binary the way a shell
//! script would: help goldens, exit-code contracts, config-file merging,
//! corpus determinism, and one full tiny pipeline.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tmt"))
        .args(args)
        .output()
        .expect("failed to launch tmt")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_ok(o: &Output, what: &str) {
    assert!(
        o.status.success(),
        "{what} failed (status {:?})\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        stdout(o),
        stderr(o)
    );
}

/// Map of relative path -> file bytes for a whole directory tree.
fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn help_output_matches_the_golden_files() {
    let golden_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let mut cases = vec![(vec!["--help"], "help.txt".to_string())];
    for cmd in [
        "gen-corpus",
        "train-tokenizers",
        "tokenize",
        "train",
        "bt",
        "translate",
        "evaluate",
        "sweep-speech-vocab",
        "bits-report",
    ] {
        cases.push((vec![cmd, "--help"], format!("help-{cmd}.txt")));
    }
    for (args, file) in cases {
        let out = tmt(&args);
        assert_ok(&out, &format!("tmt {}", args.join(" ")));
        let want = fs::read_to_string(golden_dir.join(&file)).unwrap();
        assert_eq!(stdout(&out), want, "help text drifted from tests/golden/{file}");
    }
}

#[test]
fn every_flag_in_help_shows_a_default_or_value_name() {
    // Each option line is either a bare switch or documents its value shape;
    // value-taking flags other than paths and lists carry a printed default.
    for cmd in ["gen-corpus", "train", "bits-report", "sweep-speech-vocab"] {
        let out = tmt(&[cmd, "--help"]);
        assert_ok(&out, "help");
        let text = stdout(&out);
        for line in text.lines() {
            let t = line.trim_start();
            if !t.starts_with("--") {
                continue;
            }
            let has_value = t.contains('<');
            let has_default = t.contains("[default:");
            let is_path_or_list = ["<DIR>", "<FILE>", "<LIST>", "<SPLIT>"]
                .iter()
                .any(|v| t.contains(v));
            assert!(
                !has_value || has_default || is_path_or_list || t.starts_with("--config"),
                "{cmd}: flag line lacks a default: {line}"
            );
        }
    }
}

#[test]
fn unknown_commands_and_flags_exit_1_with_usage_text() {
    let out = tmt(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage"), "stderr: {}", stderr(&out));

    let out = tmt(&["bits-report", "--no-such-flag", "3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--no-such-flag"));

    let out = tmt(&["train"]); // missing required --data/--tokenizers/--out
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("required"));
}

#[test]
fn runtime_failures_exit_2_with_a_single_coded_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = tmt(&[
        "evaluate",
        "--model",
        dir.path().join("missing.tmtckpt").to_str().unwrap(),
        "--tokenizers",
        dir.path().to_str().unwrap(),
        "--data",
        dir.path().to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert_eq!(err.lines().count(), 1, "stderr should be one line: {err}");
    assert!(err.starts_with("error: io: evaluate: "), "stderr: {err}");
}

#[test]
fn bits_report_prints_the_reference_compression_ratios() {
    let out = tmt(&["bits-report"]);
    assert_ok(&out, "bits-report");
    let text = stdout(&out);
    assert!(text.contains("ratio=0.156250%"), "speech ratio missing:\n{text}");
    assert!(text.contains("ratio=0.034545%"), "image ratio missing:\n{text}");
    assert!(text.contains("raw=256000 bits"), "speech raw bits missing:\n{text}");
    assert!(text.contains("raw=1204224 bits"), "image raw bits missing:\n{text}");
}

#[test]
fn config_file_fills_defaults_and_explicit_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# comment\naudio-seconds=9\ntoken-rate=10\n\n").unwrap();
    let out = tmt(&[
        "bits-report",
        "--config",
        cfg.to_str().unwrap(),
        "--token-rate",
        "50",
    ]);
    assert_ok(&out, "bits-report with config");
    let text = stdout(&out);
    assert!(text.contains("audio-seconds=9"), "config value ignored:\n{text}");
    assert!(text.contains("token-rate=50"), "explicit flag lost:\n{text}");

    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "no-such-key=1\n").unwrap();
    let out = tmt(&["bits-report", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "unknown config key should be a usage error");
    assert!(stderr(&out).contains("--no-such-key"));

    let out = tmt(&["bits-report", "--config", dir.path().join("absent.cfg").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("error: io:"));
}

#[test]
fn gen_corpus_is_byte_identical_for_the_same_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    for (out, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        let o = tmt(&["gen-corpus", "--out", out.to_str().unwrap(), "--n", "12", "--seed", seed]);
        assert_ok(&o, "gen-corpus");
    }
    let ta = tree(&a);
    assert_eq!(ta, tree(&b), "same seed must reproduce every file byte for byte");
    assert_ne!(ta, tree(&c), "a different seed should change the corpus");
    assert!(ta.keys().any(|k| k.ends_with(".ppm")));
    assert!(ta.keys().any(|k| k.ends_with(".feat")));
    assert!(ta.contains_key("manifest-train.tsv"));
}

#[test]
fn every_command_echoes_its_resolved_config_and_seed() {
    let out = tmt(&["bits-report"]);
    let text = stdout(&out);
    assert!(text.starts_with("command=bits-report\n"));
    assert!(text.contains("\nseed=0\n"));
}

/// The whole workflow on a 30-scene world: generate, fit tokenizers,
/// tokenize, train briefly, evaluate, back-translate, translate one caption.
#[test]
fn tiny_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();

    let out = tmt(&[
        "gen-corpus", "--out", &p("corpus"), "--n", "30", "--seed", "7", "--noise", "0.0",
    ]);
    assert_ok(&out, "gen-corpus");
    assert!(stdout(&out).contains("scenes train="));

    let out = tmt(&[
        "train-tokenizers",
        "--data", &p("corpus"),
        "--out", &p("tk"),
        "--speech-vocab", "12",
        "--image-vocab", "16",
        "--text-vocab", "60",
        "--kmeans-iters", "10",
        "--seed", "7",
    ]);
    assert_ok(&out, "train-tokenizers");
    assert!(stdout(&out).contains("speech-codebook k=12"));
    assert!(stdout(&out).contains("image-codebook k=16"));

    let out = tmt(&["tokenize", "--data", &p("corpus"), "--tokenizers", &p("tk"), "--out", &p("tok")]);
    assert_ok(&out, "tokenize");
    for split in ["train", "valid", "test"] {
        assert!(dir.path().join(format!("tok/tokens-{split}.tsv")).is_file());
    }

    let train_args = [
        "train",
        "--data", &p("tok"),
        "--tokenizers", &p("tk"),
        "--out", &p("model"),
        "--d-model", "16",
        "--heads", "2",
        "--ffn", "24",
        "--enc-layers", "1",
        "--dec-layers", "1",
        "--steps", "12",
        "--warmup", "3",
        "--batch-size", "4",
        "--log-every", "6",
        "--ckpt-every", "100",
        "--seed", "7",
    ];
    let out = tmt(&train_args);
    assert_ok(&out, "train");
    let text = stdout(&out);
    assert!(text.contains("step=12 "), "missing final step log:\n{text}");
    assert!(text.contains("valid loss="), "missing held-out loss:\n{text}");
    let ckpt = dir.path().join("model/ckpt-final.tmtckpt");
    assert!(ckpt.is_file());
    assert!(dir.path().join("model/train.log").is_file());
    // the log file carries the same step lines the console showed
    let log = fs::read_to_string(dir.path().join("model/train.log")).unwrap();
    assert!(log.lines().any(|l| l.starts_with("step=12 dir=")));

    let out = tmt(&[
        "evaluate",
        "--model", ckpt.to_str().unwrap(),
        "--tokenizers", &p("tk"),
        "--data", &p("tok"),
        "--out", &p("eval"),
        "--beam", "1",
    ]);
    assert_ok(&out, "evaluate");
    let text = stdout(&out);
    for d in ["i2s", "s2i", "i2t", "t2i", "s2t", "t2s"] {
        assert!(text.contains(&format!("direction={d}")), "missing {d}:\n{text}");
        assert!(dir.path().join(format!("eval/predictions-{d}.tsv")).is_file());
    }
    assert!(text.contains("direction  bleu4"), "missing table header:\n{text}");
    // prediction dumps are id TAB direction TAB payload
    let preds = fs::read_to_string(dir.path().join("eval/predictions-s2t.tsv")).unwrap();
    let first = preds.lines().next().unwrap();
    assert_eq!(first.split('\t').count(), 3, "bad prediction line: {first}");
    assert_eq!(first.split('\t').nth(1), Some("s2t"));

    let out = tmt(&[
        "bt",
        "--model", ckpt.to_str().unwrap(),
        "--tokenizers", &p("tk"),
        "--data", &p("tok"),
        "--out", &p("bt"),
        "--per-direction", "2",
        "--continue-steps", "2",
        "--continue-warmup", "1",
        "--batch-size", "4",
        "--seed", "7",
    ]);
    assert_ok(&out, "bt");
    let text = stdout(&out);
    assert!(text.contains("bt attempted=12 "), "wrong attempt count:\n{text}");
    assert!(text.contains("valid-before loss="));
    assert!(text.contains("valid-after loss="));
    assert!(dir.path().join("bt/bt-pairs.tsv").is_file());
    assert!(dir.path().join("bt/ckpt-final.tmtckpt").is_file());

    fs::write(dir.path().join("cap.txt"), "a red circle\n").unwrap();
    let out = tmt(&[
        "translate",
        "--model", ckpt.to_str().unwrap(),
        "--tokenizers", &p("tk"),
        "--direction", "t2i",
        "--input", &p("cap.txt"),
        "--out", &p("tr"),
        "--beam", "2",
    ]);
    assert_ok(&out, "translate");
    let text = stdout(&out);
    assert!(text.contains("output-tokens="));
    // an image hypothesis is exactly the 32 patch slots
    let toks = text
        .lines()
        .find(|l| l.starts_with("output-tokens="))
        .unwrap()
        .trim_start_matches("output-tokens=")
        .split_whitespace()
        .count();
    assert_eq!(toks, 32);
    assert!(dir.path().join("tr/translation.ppm").is_file());
}

#[test]
fn sweep_rejects_a_single_size() {
    let dir = tempfile::tempdir().unwrap();
    let out = tmt(&[
        "sweep-speech-vocab",
        "--data", dir.path().to_str().unwrap(),
        "--out", dir.path().join("o").to_str().unwrap(),
        "--sizes", "200",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("error: invalid-argument: sweep-speech-vocab: "));
}
