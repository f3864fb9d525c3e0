use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn toy_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml")
}

fn gau(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gau")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_toy(out: &Path, steps: &str) -> Output {
    let cfg = toy_config();
    gau(&["train", "--config", s(&cfg), "--out", s(out), "--steps", steps, "--log-every", "0"])
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn exit_codes() {
    assert_eq!(code(&gau(&["--help"])), 0);
    assert_eq!(code(&gau(&["--version"])), 0);
    assert_eq!(code(&gau(&[])), 1);
    assert_eq!(code(&gau(&["train", "--no-such-flag"])), 1);
    assert_eq!(code(&gau(&["train", "--config", "/nonexistent/config.toml"])), 1);

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.gauc");
    let out = gau(&["eval-lengths", "--out", s(dir.path()), "--checkpoint", s(&missing)]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn bad_keys_are_named() {
    let out = gau(&["train", "--override", "model.d_hh=3"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("model.d_hh"), "{}", stderr(&out));

    let out = gau(&["train", "--override", "train.peak_lr=\"fast\""]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("train.peak_lr"), "{}", stderr(&out));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[model]\nnum_layers = 2\n[trian]\nseed = 1\n").unwrap();
    let out = gau(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("trian"), "{}", stderr(&out));

    let out = gau(&["count-params", "--d-h", "4", "--s", "2", "--out", s(dir.path())]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("bench.heads"), "{}", stderr(&out));
}

#[test]
fn zero_steps_writes_an_empty_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_toy(dir.path(), "0");
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(read(&dir.path().join("metrics.csv")).trim(), "step,loss,lr,masked_acc,seq_len");
    let ckpt = std::fs::read(dir.path().join("checkpoint.gauc")).unwrap();
    assert_eq!(&ckpt[..4], b"GAUC");
    assert!(dir.path().join("config.resolved.toml").exists());
    assert!(dir.path().join("vocab.txt").exists());
}

#[test]
fn training_is_reproducible_from_the_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert_eq!(code(&train_toy(&a, "20")), 0);
    assert_eq!(code(&train_toy(&b, "20")), 0);
    let metrics = read(&a.join("metrics.csv"));
    assert_eq!(csv_rows(&metrics).len(), 21);
    assert_eq!(metrics, read(&b.join("metrics.csv")));

    let resolved = a.join("config.resolved.toml");
    let out = gau(&["train", "--config", s(&resolved), "--out", s(&c), "--log-every", "0"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["metrics.csv", "eval.csv", "vocab.txt"] {
        assert_eq!(read(&a.join(f)), read(&c.join(f)), "{f}");
    }
    assert_eq!(
        std::fs::read(a.join("checkpoint.gauc")).unwrap(),
        std::fs::read(c.join("checkpoint.gauc")).unwrap()
    );
    let again = read(&c.join("config.resolved.toml"));
    assert_eq!(read(&resolved).replace(s(&a), s(&c)), again);
}

#[test]
fn toy_preset_learns() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_toy(dir.path(), "200");
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = csv_rows(&read(&dir.path().join("metrics.csv")));
    let loss: Vec<f64> = rows[1..].iter().map(|r| r[1].parse().unwrap()).collect();
    let first = loss[..10].iter().sum::<f64>() / 10.0;
    let last = loss[loss.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn resume_continues_a_stopped_run() {
    let dir = tempfile::tempdir().unwrap();
    let (full, half, rest) = (dir.path().join("full"), dir.path().join("half"), dir.path().join("rest"));
    assert_eq!(code(&train_toy(&full, "12")), 0);
    let cfg = toy_config();
    let out = gau(&[
        "train", "--config", s(&cfg), "--out", s(&half), "--steps", "12", "--log-every", "0",
        "--override", "train.stop_after=6",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ckpt = half.join("checkpoint.gauc");
    let out = gau(&[
        "train", "--config", s(&cfg), "--out", s(&rest), "--steps", "12", "--log-every", "0",
        "--resume", s(&ckpt),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        std::fs::read(full.join("checkpoint.gauc")).unwrap(),
        std::fs::read(rest.join("checkpoint.gauc")).unwrap()
    );
    let joined: Vec<_> = csv_rows(&read(&half.join("metrics.csv")))
        .into_iter()
        .chain(csv_rows(&read(&rest.join("metrics.csv"))).into_iter().skip(1))
        .collect();
    assert_eq!(joined, csv_rows(&read(&full.join("metrics.csv"))));
}

#[test]
fn eval_lengths_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert_eq!(code(&train_toy(&run, "10")), 0);
    let ckpt = run.join("checkpoint.gauc");
    let sweep = dir.path().join("sweep");
    let out = gau(&["eval-lengths", "--out", s(&sweep), "--checkpoint", s(&ckpt), "--lengths", "16,32,64"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = csv_rows(&read(&sweep.join("eval_lengths.csv")));
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0].join(","), "run,kernel,train_len,eval_len,masked_acc,loss,masked,rel_change");

    // The row at the training length repeats the run's own final evaluation.
    let at_train = rows.iter().find(|r| r[3] == "32").unwrap();
    let eval = csv_rows(&read(&run.join("eval.csv")));
    let final_acc: f64 = eval.last().unwrap()[2].parse().unwrap();
    let acc: f64 = at_train[4].parse().unwrap();
    assert!((acc - final_acc).abs() < 1e-6);
    assert_eq!(at_train[7].parse::<f64>().unwrap(), 0.0);

    let empty = dir.path().join("empty");
    let out = gau(&["eval-lengths", "--out", s(&empty), "--checkpoint", s(&ckpt), "--lengths", ""]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(csv_rows(&read(&empty.join("eval_lengths.csv"))).len(), 1);

    let out = gau(&["eval-lengths", "--out", s(&empty), "--checkpoint", s(&ckpt), "--lengths", "65"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("65"), "{}", stderr(&out));
}

#[test]
fn analyze_random_init() {
    let dir = tempfile::tempdir().unwrap();
    let out = gau(&["analyze", "--random-init", "--kernels", "qk", "--n", "512", "--seeds", "0", "--out", s(dir.path())]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = csv_rows(&read(&dir.path().join("analysis.csv")));
    let col = |name: &str| rows[0].iter().position(|c| c == name).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1][col("rank_ratio")].parse::<f64>().unwrap(), 0.25);

    let out = gau(&["analyze", "--random-init", "--kernels", "softmax", "--n", "1", "--seeds", "0", "--out", s(dir.path())]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = csv_rows(&read(&dir.path().join("analysis.csv")));
    assert_eq!(rows[1][col("rank")], "1");

    let out = gau(&["analyze", "--random-init", "--n", "128,512", "--out", s(dir.path())]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = read(&dir.path().join("analysis.csv"));
    assert_eq!(csv_rows(&report).len(), 31);

    // Rerunning from the written config reproduces the report.
    let again = dir.path().join("again");
    let resolved = dir.path().join("config.resolved.toml");
    let out = gau(&["analyze", "--config", s(&resolved), "--out", s(&again)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(read(&again.join("analysis.csv")), report);
}

#[test]
fn count_params_headline() {
    let dir = tempfile::tempdir().unwrap();
    let out = gau(&["count-params", "--d-h", "768", "--out", s(dir.path())]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = csv_rows(&read(&dir.path().join("params.csv")));
    let gau_row = rows.iter().find(|r| r[0] == "gau").unwrap();
    assert_eq!(gau_row[3], "3538944");
    let two = rows.iter().find(|r| r[0] == "gau_x2").unwrap();
    let base = rows.iter().find(|r| r[0] == "mhsa_ffn").unwrap();
    assert_eq!(two[3], base[3]);

    let out = gau(&["count-params", "--d-h", "4", "--s", "2", "--heads", "1", "--out", s(dir.path())]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = csv_rows(&read(&dir.path().join("params.csv")));
    let g = rows.iter().find(|r| r[0] == "gau").unwrap();
    assert_eq!(g[3], "96");
    let (headline, exact): (u64, u64) = (g[3].parse().unwrap(), g[4].parse().unwrap());
    assert_eq!(exact - headline, 4 * 2 + 4 * 2);
}

#[test]
fn bench_single_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config();
    let out = gau(&["bench", "--config", s(&cfg), "--lengths", "32", "--repeats", "1", "--out", s(dir.path())]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = csv_rows(&read(&dir.path().join("bench.csv")));
    assert_eq!(rows.len(), 2);
    let col = |name: &str| rows[0].iter().position(|c| c == name).unwrap();
    assert_eq!(rows[1][col("params_match")], "true");
    assert_eq!(rows[1][col("gau_status")], "ok");
}

#[test]
fn make_corpus_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.txt"), dir.path().join("b.txt"));
    assert_eq!(code(&gau(&["make-corpus", "--bytes", "5000", "--out", s(&a)])), 0);
    assert_eq!(code(&gau(&["make-corpus", "--bytes", "5000", "--out", s(&b)])), 0);
    let text = read(&a);
    assert_eq!(text, read(&b));
    assert!(text.len() >= 5000 && text.lines().count() > 1);

    // A file corpus trains like any other.
    let run = dir.path().join("run");
    let cfg = toy_config();
    let out = gau(&[
        "train", "--config", s(&cfg), "--out", s(&run), "--steps", "2", "--log-every", "0",
        "--override", &format!("paths.corpus={}", s(&a)),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}
