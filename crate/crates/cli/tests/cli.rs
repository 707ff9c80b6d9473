//! End-to-end runs of the `elmo` binary on the bundled corpora with a tiny
//! model configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = "\
charcnn.char_emb_dim=4
charcnn.filters=1x4,2x4
charcnn.n_highway=1
charcnn.d_proj=8
bilm.d_cell=16
bilm.d_proj=8
train.epochs=1
train.lr=0.005
";

fn data(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn elmo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elmo")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

struct Work {
    dir: TempDir,
}

impl Work {
    fn new() -> Work {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
        Work { dir }
    }

    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).to_string_lossy().into_owned()
    }

    fn config(&self) -> String {
        self.path("tiny.cfg")
    }

    /// Trains the tiny biLM on the toy corpus into `name`.
    fn checkpoint(&self, name: &str, seed: &str) -> PathBuf {
        let out = elmo(&["train-lm", "--config", &self.config(), "--corpus", &data("toy.txt"), "--out", &self.path(name), "--seed", seed]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        PathBuf::from(self.path(name))
    }
}

#[test]
fn no_arguments_prints_usage_and_exits_1() {
    let out = elmo(&[]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_command_and_bad_flags_exit_1() {
    assert_eq!(code(&elmo(&["bogus"])), 1);
    assert_eq!(code(&elmo(&["perplexity", "--corpus", "x"])), 1);
    let bad_location = elmo(&["train-task", "--corpus", "a", "--dev", "b", "--elmo-location", "middle"]);
    assert_eq!(code(&bad_location), 1);
}

#[test]
fn flags_are_validated_before_files_are_read() {
    // Neither corpus exists; the flag problem must win.
    let out = elmo(&["sample-efficiency", "--corpus", "missing", "--dev", "missing", "--ckpt", "missing", "--fractions", "0,0.5"]);
    assert_eq!(code(&out), 1);
    let out = elmo(&["train-task", "--corpus", "missing", "--dev", "missing", "--elmo-location", "input"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn data_errors_exit_2() {
    let w = Work::new();
    assert_eq!(code(&elmo(&["perplexity", "--ckpt", "missing.ckpt", "--corpus", &data("toy.txt")])), 2);
    let not_ckpt = elmo(&["perplexity", "--ckpt", &data("toy.txt"), "--corpus", &data("toy.txt")]);
    assert_eq!(code(&not_ckpt), 2);
    fs::write(w.path("bad.txt"), "a_B c\n").unwrap();
    let bad = elmo(&["train-task", "--corpus", &w.path("bad.txt"), "--dev", &w.path("bad.txt"), "--elmo-location", "none"]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let w = Work::new();
    fs::write(w.path("typo.cfg"), "task.epoch=3\n").unwrap();
    let out = elmo(&["gradcheck", "--config", &w.path("typo.cfg")]);
    assert_eq!(code(&out), 1);
}

#[test]
fn gradcheck_passes() {
    let out = elmo(&["gradcheck"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("bilm_joint_nll"));
    assert!(text.contains("crf_nll"));
}

#[test]
fn flags_override_config_which_overrides_defaults() {
    let w = Work::new();
    fs::write(w.path("task.cfg"), "task.epochs=3\ntask.elmo_location=none\n").unwrap();
    let base = ["train-task", "--corpus", &data("task_train.txt"), "--dev", &data("task_dev.txt")];
    let epoch_rows = |out: &Output| stdout(out).lines().filter(|l| l.chars().next().is_some_and(|c| c.is_ascii_digit())).count();

    let from_config = elmo(&[&base[..], &["--config", &w.path("task.cfg")]].concat());
    assert_eq!(code(&from_config), 0);
    assert_eq!(epoch_rows(&from_config), 3);

    let from_flag = elmo(&[&base[..], &["--config", &w.path("task.cfg"), "--epochs", "1"]].concat());
    assert_eq!(epoch_rows(&from_flag), 1);

    // Without the config file the default placement needs a checkpoint.
    assert_eq!(code(&elmo(&[&base[..], &["--epochs", "1"]].concat())), 1);
}

#[test]
fn training_is_reproducible_byte_for_byte() {
    let w = Work::new();
    let a = w.checkpoint("a.ckpt", "7");
    let b = w.checkpoint("b.ckpt", "7");
    let c = w.checkpoint("c.ckpt", "8");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());

    for name in ["r1.bin", "r2.bin"] {
        let out = elmo(&["embed", "--ckpt", a.to_str().unwrap(), "--corpus", &data("toy.txt"), "--out", &w.path(name)]);
        assert_eq!(code(&out), 0);
    }
    assert_eq!(fs::read(w.path("r1.bin")).unwrap(), fs::read(w.path("r2.bin")).unwrap());
}

#[test]
fn language_model_commands() {
    let w = Work::new();
    let ckpt = w.checkpoint("lm.ckpt", "0");
    let ckpt = ckpt.to_str().unwrap();

    let ppl = elmo(&["perplexity", "--ckpt", ckpt, "--corpus", &data("toy.txt")]);
    assert_eq!(code(&ppl), 0);
    let row: Vec<f64> = stdout(&ppl).lines().nth(1).unwrap().split('\t').map(|v| v.parse().unwrap()).collect();
    assert!((row[2] - (row[0] + row[1]) / 2.0).abs() < 1e-5);

    let ft = elmo(&["finetune-lm", "--config", &w.config(), "--ckpt", ckpt, "--corpus", &data("shift.txt"), "--out", &w.path("ft.ckpt")]);
    assert_eq!(code(&ft), 0);
    let text = stdout(&ft);
    assert!(text.lines().any(|l| l.starts_with("before\t")));
    assert!(text.lines().any(|l| l.starts_with("after\t")));
    assert!(Path::new(&w.path("ft.ckpt")).exists());

    let wsd = elmo(&[
        "probe-wsd",
        "--ckpt",
        ckpt,
        "--corpus",
        &data("wsd_train.tsv"),
        "--dev",
        &data("wsd_test.tsv"),
        "--layer",
        "1",
        "--out",
        &w.path("senses.tsv"),
    ]);
    assert_eq!(code(&wsd), 0);
    let n_test = fs::read_to_string(data("wsd_test.tsv")).unwrap().lines().count();
    assert_eq!(fs::read_to_string(w.path("senses.tsv")).unwrap().lines().count(), n_test);
    let too_deep = elmo(&["probe-wsd", "--ckpt", ckpt, "--corpus", &data("wsd_train.tsv"), "--dev", &data("wsd_test.tsv"), "--layer", "3"]);
    assert_eq!(code(&too_deep), 1);

    let pos = elmo(&["probe-pos", "--ckpt", ckpt, "--corpus", &data("pos_train.txt"), "--dev", &data("pos_dev.txt"), "--layer", "0", "--epochs", "2"]);
    assert_eq!(code(&pos), 0);

    let report = elmo(&["probe-report", "--ckpt", ckpt, "--data", &data(""), "--epochs", "2"]);
    assert_eq!(code(&report), 0);
    assert_eq!(stdout(&report).lines().count(), 1 + 3);
}

#[test]
fn task_commands() {
    let w = Work::new();
    let ckpt = w.checkpoint("lm.ckpt", "0");
    let ckpt = ckpt.to_str().unwrap();
    let task = ["--corpus", &data("task_train.txt"), "--dev", &data("task_dev.txt"), "--ckpt", ckpt, "--epochs", "1"];

    let train = elmo(&[&["train-task", "--elmo-location", "both", "--out", &w.path("t.tag")][..], &task].concat());
    assert_eq!(code(&train), 0);
    let best: f64 = stdout(&train)
        .lines()
        .find_map(|l| l.strip_prefix("best\t"))
        .and_then(|l| l.split('\t').nth(1))
        .unwrap()
        .parse()
        .unwrap();

    let eval = elmo(&["eval-task", "--tagger", &w.path("t.tag"), "--dev", &data("task_dev.txt"), "--ckpt", ckpt, "--out", &w.path("pred.txt")]);
    assert_eq!(code(&eval), 0);
    let acc: f64 = stdout(&eval).trim().split('\t').nth(1).unwrap().parse().unwrap();
    assert!((acc - best).abs() < 1e-4);
    let n_dev = fs::read_to_string(data("task_dev.txt")).unwrap().lines().count();
    assert_eq!(fs::read_to_string(w.path("pred.txt")).unwrap().lines().count(), n_dev);
    let no_ckpt = elmo(&["eval-task", "--tagger", &w.path("t.tag"), "--dev", &data("task_dev.txt")]);
    assert_eq!(code(&no_ckpt), 1);

    let weights = elmo(&["weights-report", "--tagger", &w.path("t.tag")]);
    assert_eq!(code(&weights), 0);
    let text = stdout(&weights);
    // (L + 1) weights per location, then one gamma row per location.
    assert_eq!(text.lines().filter(|l| !l.contains("gamma")).count(), 1 + 3 * 2);
    assert_eq!(text.lines().filter(|l| l.contains("gamma")).count(), 2);

    let grid = elmo(&[&["ablation", "--out", &w.path("ablation.tsv")][..], &task].concat());
    assert_eq!(code(&grid), 0);
    let table = fs::read_to_string(w.path("ablation.tsv")).unwrap();
    assert_eq!(table, stdout(&grid));
    let names: Vec<&str> = table.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(names, ["last_only", "lambda=1", "lambda=0.001", "input", "output", "both"]);

    let curve = elmo(&[&["sample-efficiency", "--fractions", "0.5,1.0", "--seeds", "0,1"][..], &task].concat());
    assert_eq!(code(&curve), 0);
    // Header, four per-seed rows, two mean rows.
    assert_eq!(stdout(&curve).lines().count(), 1 + 4 + 2);
}
