use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use gpn::config::RunConfig;
use gpn::data::DamageSchedule;
use serde_json::{json, Value};

fn gpn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpn")).args(args).output().expect("run gpn")
}

fn ok(args: &[&str]) -> String {
    let out = gpn(args);
    assert!(out.status.success(), "gpn {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small prepared fixture shared by the tests: caches, a config and an
/// untrained checkpoint.
struct Env {
    root: PathBuf,
    train: PathBuf,
    test: PathBuf,
}

impl Env {
    fn config(&self, name: &str, extra: impl FnOnce(&mut Value)) -> PathBuf {
        let mut cfg = json!({
            "data": { "train_cache": self.train, "test_cache": self.test },
            "model": { "encoder": { "arch": "small", "embedding_dim": 8, "covariance": "radius" } },
            "train": { "spec": { "n_classes": 5, "n_support": 1, "n_query": 2 }, "max_episodes": 0 },
            "eval": { "n_way": 5, "ks": [1], "episodes_per_point": 2 },
            "output_dir": self.root.join(name),
            "seeds": { "data": 1, "model": 2, "eval": 3 }
        });
        extra(&mut cfg);
        let path = self.root.join(format!("{name}.json"));
        std::fs::write(&path, cfg.to_string()).unwrap();
        path
    }

    fn checkpoint(&self) -> PathBuf {
        self.root.join("init/checkpoints/ckpt_00000000.bin")
    }
}

fn env() -> &'static Env {
    static ENV: OnceLock<Env> = OnceLock::new();
    ENV.get_or_init(|| {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli");
        let _ = std::fs::remove_dir_all(&root);
        std::fs::create_dir_all(&root).unwrap();
        let omni = root.join("omni");
        ok(&["fixture", "--out", s(&omni), "--max-chars", "1"]);
        ok(&["prepare", "--omniglot-dir", s(&omni), "--out", s(&root.join("c")), "--lenient"]);
        let env = Env { train: root.join("c.train.bin"), test: root.join("c.test.bin"), root };
        ok(&["train", "--config", s(&env.config("init", |_| {}))]);
        env
    })
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let smoke = RunConfig::load(&dir.join("desk_smoke.json")).unwrap();
    assert_eq!(smoke.train.max_episodes, 1500);
    assert_eq!(smoke.data.train_classes, Some(100));
    let full = RunConfig::load(&dir.join("full_regime.json")).unwrap();
    assert_eq!((full.train.spec.n_classes, full.train.spec.n_support), (60, 1));
    assert_eq!((full.train.initial_lr, full.train.halve_every), (2e-3, 2000));
    assert_eq!(full.damage, DamageSchedule::reference());
}

#[test]
fn prepare_reports_counts_and_rejects_bad_paths() {
    let e = env();
    let out = gpn(&["prepare", "--omniglot-dir", "/no/such/omniglot", "--out", s(&e.root.join("x"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("/no/such/omniglot"));

    let out = gpn(&["prepare", "--omniglot-dir", s(&e.root.join("omni")), "--out", s(&e.root.join("strict"))]);
    assert_ne!(code(&out), 0);
    assert!(stderr(&out).contains("expected"), "{}", stderr(&out));

    let text = ok(&["prepare", "--omniglot-dir", s(&e.root.join("omni")), "--out", s(&e.root.join("plain")), "--lenient", "--no-augment"]);
    assert!(text.contains("Train: 30 base classes, 30 classes, 600 images"), "{text}");
    assert!(text.contains("Test: 20 base classes, 20 classes, 400 images"), "{text}");
}

#[test]
fn zero_episodes_write_only_the_initial_checkpoint() {
    let e = env();
    let files: Vec<_> = std::fs::read_dir(e.root.join("init/checkpoints")).unwrap().map(|f| f.unwrap().file_name()).collect();
    assert_eq!(files, vec!["ckpt_00000000.bin"]);
    let metrics = std::fs::read_to_string(e.root.join("init/metrics.csv")).unwrap();
    assert_eq!(metrics.trim(), "episode,lr,loss,train_acc");
    // The echoed config re-validates.
    RunConfig::load(&e.root.join("init/config.json")).unwrap();
}

#[test]
fn training_is_reproducible_and_logs_the_rate() {
    let e = env();
    let run = |name: &str| {
        let cfg = e.config(name, |c| c["train"]["max_episodes"] = json!(3));
        let out = gpn(&["train", "--config", s(&cfg), "--log-every", "1"]);
        assert!(out.status.success());
        let log = stderr(&out);
        (log, std::fs::read(e.root.join(name).join("metrics.csv")).unwrap())
    };
    let (log, a) = run("rep_a");
    let (_, b) = run("rep_b");
    assert!(log.contains("episode 0 lr 2e-3"), "{log}");
    assert_eq!(a, b);
}

#[test]
fn configuration_problems_exit_with_code_two() {
    let e = env();
    let out = gpn(&["train", "--config", s(&e.root.join("missing.json"))]);
    assert_eq!(code(&out), 2);

    let typo = e.config("typo", |c| c["train"]["max_epsiodes"] = json!(3));
    assert_eq!(code(&gpn(&["train", "--config", s(&typo)])), 2);

    let bad = e.config("bad", |c| {
        c["train"]["spec"]["n_classes"] = json!(1);
        c["eval"]["n_way"] = json!(1);
    });
    let out = gpn(&["train", "--config", s(&bad)]);
    assert_eq!(code(&out), 2);
    let msg = stderr(&out);
    assert!(msg.contains("n_classes") && msg.contains("n_way"), "{msg}");
}

#[test]
fn eval_reports_every_shot_count() {
    let e = env();
    let out = ok(&["eval", "--checkpoint", s(&e.checkpoint()), "--cache", s(&e.test), "--n-way", "20", "--episodes", "1"]);
    let report: Value = serde_json::from_str(&out).unwrap();
    let results = report["results"].as_array().unwrap();
    let ks: Vec<u64> = results.iter().map(|r| r["k"].as_u64().unwrap()).collect();
    assert_eq!(ks, (1..=19).collect::<Vec<_>>());
    assert_eq!(results[0]["n_query"], 19);
}

#[test]
fn eval_usage_errors() {
    let e = env();
    let ckpt = e.checkpoint();
    let (ck, cache) = (s(&ckpt), s(&e.test));
    let out = gpn(&["eval", "--checkpoint", s(&e.root.join("none.bin")), "--cache", cache, "--n-way", "5"]);
    assert_eq!(code(&out), 2);

    let out = gpn(&["eval", "--checkpoint", s(&e.root.join("init")), "--cache", cache, "--n-way", "5", "--best5"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--metrics"));

    let out = gpn(&["eval", "--checkpoint", ck, "--cache", cache, "--n-way", "500"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("n_way 500"));
}

#[test]
fn eval_writes_identical_reports_to_file() {
    let e = env();
    let run = |name: &str| {
        let path = e.root.join(name);
        let text = ok(&["eval", "--checkpoint", s(&e.checkpoint()), "--cache", s(&e.test), "--n-way", "5", "--ks", "1,5",
                        "--episodes", "3", "--out", s(&path)]);
        (text, std::fs::read(path).unwrap())
    };
    let (rows, a) = run("r1.json");
    let (_, b) = run("r2.json");
    assert_eq!(a, b);
    assert!(rows.contains("5-way 1-shot") && rows.contains("5-way 5-shot"), "{rows}");
}

#[test]
fn pca_export_has_one_row_per_point() {
    let e = env();
    let csv = e.root.join("pca.csv");
    ok(&["export", "--kind", "pca", "--checkpoint", s(&e.checkpoint()), "--cache", s(&e.test), "--out", s(&csv)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x,y,class_id,is_prototype"));
    assert_eq!(lines.count(), 500);

    ok(&["export", "--kind", "pca", "--checkpoint", s(&e.checkpoint()), "--cache", s(&e.test), "--out", s(&csv),
         "--images", "50", "--prototypes"]);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 50 + 3);
    assert_eq!(text.lines().filter(|l| l.ends_with(",1")).count(), 3);
}

#[test]
fn covariance_histogram_needs_a_comparison_and_a_covariance_model() {
    let e = env();
    let ckpt = e.checkpoint();
    let (ck, cache, csv) = (s(&ckpt), s(&e.test), e.root.join("hist.csv"));
    let out = gpn(&["export", "--kind", "cov-hist", "--checkpoint", ck, "--cache", cache, "--out", s(&csv)]);
    assert_eq!(code(&out), 2);

    let text = ok(&["export", "--kind", "cov-hist", "--checkpoint", ck, "--cache", cache, "--out", s(&csv),
                    "--images", "200", "--damage-copy"]);
    assert!(text.contains("above-mode mass"), "{text}");
    let csv_text = std::fs::read_to_string(&csv).unwrap();
    assert!(csv_text.lines().any(|l| l == "offset,aligned_center,clean,damaged"));

    let vanilla = e.config("vanilla", |c| c["model"]["encoder"]["covariance"] = json!("vanilla"));
    ok(&["train", "--config", s(&vanilla)]);
    let vck = e.root.join("vanilla/checkpoints/ckpt_00000000.bin");
    let out = gpn(&["export", "--kind", "cov-hist", "--checkpoint", s(&vck), "--cache", cache, "--out", s(&csv), "--damage-copy"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("unsupported model"), "{}", stderr(&out));
}

#[test]
fn interrupt_writes_a_final_checkpoint() {
    let e = env();
    let cfg = e.config("interrupt", |c| c["train"]["max_episodes"] = json!(1_000_000));
    let mut child = Command::new(env!("CARGO_BIN_EXE_gpn"))
        .args(["train", "--config", s(&cfg), "--log-every", "0"])
        .stderr(std::process::Stdio::null())
        .spawn()
        .unwrap();
    let metrics = e.root.join("interrupt/metrics.csv");
    let started = std::time::Instant::now();
    while std::fs::read_to_string(&metrics).map_or(0, |t| t.lines().count()) < 4 {
        assert!(started.elapsed().as_secs() < 120, "no progress");
        std::thread::sleep(std::time::Duration::from_millis(50));
    }
    // SAFETY: plain signal delivery to a child we own.
    unsafe { libc::kill(child.id() as libc::pid_t, libc::SIGINT) };
    assert!(child.wait().unwrap().success());

    let info: Value = serde_json::from_str(&std::fs::read_to_string(e.root.join("interrupt/run_info.json")).unwrap()).unwrap();
    assert_eq!(info["status"], "interrupted");
    let done = std::fs::read_to_string(&metrics).unwrap().lines().count() as u64 - 1;
    let last = e.root.join("interrupt/checkpoints").join(gpn::runlog::checkpoint_name(done));
    assert!(last.exists(), "missing {}", last.display());
}
