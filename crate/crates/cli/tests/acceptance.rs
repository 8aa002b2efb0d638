//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! nonzero if a gating criterion fails.
//!
//! `GPN_ACCEPTANCE=1,2,5` runs a subset. `GPN_FULL_EVAL=<report.json>`
//! supplies the best-5 report of a completed full-regime run for the
//! optional reproduction check.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use gpn::autodiff::Tape;
use gpn::data::{read_cache, read_cache_header, write_cache, ClassInfo, Dataset, Split};
use gpn::encoder::{Arch, CovarianceKind, EncoderConfig, IMAGE_PIXELS};
use gpn::episodes::{sample_episode, EpisodeSpec};
use gpn::gradcheck::check_all_ops;
use gpn::head::{distance, episode_forward, fuse_prototype, CovarianceTransform, DistanceTransform, TransformScalars};
use gpn::model::{Model, ModelConfig};
use gpn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

const GPN: &str = env!("CARGO_BIN_EXE_gpn");

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

struct Suite {
    dir: tempfile::TempDir,
    caches: Option<(PathBuf, PathBuf)>,
    seed0_run: Option<PathBuf>,
}

fn gpn(args: &[&str]) -> Result<String, String> {
    let out = Command::new(GPN).args(args).output().map_err(|e| format!("cannot run gpn: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "gpn {} exited with {}: {}",
            args.first().unwrap_or(&""),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

impl Suite {
    /// Standard-layout fixture and its augmented caches, built once.
    fn caches(&mut self) -> Result<(PathBuf, PathBuf), String> {
        if let Some(c) = &self.caches {
            return Ok(c.clone());
        }
        let root = self.dir.path().join("omniglot");
        gpn(&["fixture", "--out", s(&root), "--seed", "0"])?;
        let stem = self.dir.path().join("std");
        gpn(&["prepare", "--omniglot-dir", s(&root), "--out", s(&stem)])?;
        let c = (stem.with_extension("train.bin"), stem.with_extension("test.bin"));
        self.caches = Some(c.clone());
        Ok(c)
    }

    fn smoke_config(&mut self, seed: u64) -> Result<PathBuf, String> {
        let (train, test) = self.caches()?;
        let cfg = json!({
            "data": { "train_cache": train, "test_cache": test, "train_classes": 100 },
            "model": {
                "encoder": { "arch": "small", "embedding_dim": 32, "covariance": "radius" },
                "covariance_transform": "softplus_offset",
                "distance": "linear"
            },
            "train": {
                "spec": { "n_classes": 60, "n_support": 1, "n_query": 1 },
                "max_episodes": 1500,
                "checkpoint_every": 250,
                "save_optimizer": true
            },
            "eval": { "n_way": 5, "ks": [1], "episodes_per_point": 200 },
            "output_dir": self.dir.path().join(format!("smoke{seed}")),
            "seeds": { "data": seed, "model": seed, "eval": seed }
        });
        let path = self.dir.path().join(format!("smoke{seed}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).map_err(|e| e.to_string())?;
        Ok(path)
    }

    /// Trains one smoke run and returns its directory.
    fn smoke_run(&mut self, seed: u64) -> Result<PathBuf, String> {
        if seed == 0 {
            if let Some(run) = &self.seed0_run {
                return Ok(run.clone());
            }
        }
        let cfg = self.smoke_config(seed)?;
        gpn(&["train", "--config", s(&cfg), "--log-every", "0"])?;
        let run = self.dir.path().join(format!("smoke{seed}"));
        if seed == 0 {
            self.seed0_run = Some(run.clone());
        }
        Ok(run)
    }
}

fn read_json(path: &Path) -> Result<Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn mean_at(report: &Value, k: u64) -> Option<f64> {
    report["results"].as_array()?.iter().find(|r| r["k"].as_u64() == Some(k))?["mean"].as_f64()
}

fn gradients() -> Outcome {
    match check_all_ops(20, 0xACCE) {
        Err(e) => Outcome::Fail(e.to_string()),
        Ok(checks) => {
            let worst = checks.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
            let detail = format!("{} ops x {} instances, worst {} at {:.2e}", checks.len(), worst.instances, worst.op, worst.max_rel_error);
            if checks.iter().all(|c| c.instances >= 20 && c.max_rel_error < 1e-6) {
                Outcome::Pass(detail)
            } else {
                Outcome::Fail(detail)
            }
        }
    }
}

fn prototype_math() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xBEEF);
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-300);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (d, n) = (rng.random_range(1..16), rng.random_range(1..10));
        let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-4.0..4.0)).collect()).collect();
        let ss: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(1.0..8.0)).collect()).collect();
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-4.0..4.0)).collect();
        let p = fuse_prototype(&xs.iter().map(Vec::as_slice).collect::<Vec<_>>(), &ss.iter().map(Vec::as_slice).collect::<Vec<_>>()).unwrap();
        let mut acc = 0.0;
        for k in 0..d {
            let total: f64 = ss.iter().map(|s| s[k]).sum();
            let centre = xs.iter().zip(&ss).map(|(x, s)| x[k] * s[k]).sum::<f64>() / total;
            worst = worst.max(rel(p.inv_cov[k], total));
            if (p.centroid[k] - centre).abs() > 1e-12 {
                worst = worst.max(rel(p.centroid[k], centre));
            }
            acc += total * (q[k] - centre).powi(2);
        }
        worst = worst.max(rel(distance(&q, &p), acc.sqrt()));
        if n == 1 && p.centroid != xs[0] {
            return Outcome::Fail("single support point was not returned exactly".into());
        }
    }
    let detail = format!("1000 instances, worst relative error {worst:.2e}");
    if worst < 1e-6 {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

/// Raw values stay inside [-30, 30]: past about 37 in magnitude, f64
/// rounds the sigmoid to 1 and softplus to 0, closing the open bounds.
fn transforms() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let init = TransformScalars::default();
    let mut bad = Vec::new();
    for _ in 0..100_000 {
        let raw = rng.random_range(-30.0..30.0);
        let a = CovarianceTransform::SoftplusOffset.apply(raw, &init);
        let b = CovarianceTransform::SigmoidOffset.apply(raw, &init);
        let c = CovarianceTransform::SigmoidScaled4.apply(raw, &init);
        let d = CovarianceTransform::TrainableSoftplus.apply(raw, &init);
        if !(a > 1.0 && b > 1.0 && b < 2.0 && c > 1.0 && c < 5.0 && (a - d).abs() <= 1e-6) {
            bad.push(raw);
        }
    }
    if bad.is_empty() {
        Outcome::Pass("1e5 inputs in [-30, 30]".into())
    } else {
        Outcome::Fail(format!("{} violations, first at {}", bad.len(), bad[0]))
    }
}

fn dataset_counts(suite: &mut Suite) -> Outcome {
    let start = Instant::now();
    let mut run = || -> Result<String, String> {
        let (train, test) = suite.caches()?;
        let root = suite.dir.path().join("omniglot");
        let plain = suite.dir.path().join("plain");
        gpn(&["prepare", "--omniglot-dir", s(&root), "--out", s(&plain), "--no-augment"])?;
        let header = |p: &Path| read_cache_header(p).map_err(|e| e.to_string());
        let (tr, te) = (header(&train)?, header(&test)?);
        let (ptr, pte) = (header(&plain.with_extension("train.bin"))?, header(&plain.with_extension("test.bin"))?);
        let base = |h: &gpn::data::CacheHeader| h.classes.iter().filter(|c| c.rotation == 0).count();
        let got = [base(&tr), base(&te), ptr.n_classes, pte.n_classes, tr.n_classes, te.n_classes, tr.n_images, te.n_images];
        let want = [964, 659, 964, 659, 3856, 2636, 77_120, 52_720];
        let detail = format!("base {}/{}, unaugmented {}/{}, augmented {}/{}, images {}/{}", got[0], got[1], got[2], got[3], got[4], got[5], got[6], got[7]);
        if got == want {
            Ok(detail)
        } else {
            Err(detail)
        }
    };
    match run() {
        Ok(d) if start.elapsed().as_secs() < 300 => Outcome::Pass(format!("{d} in {:.0} s", start.elapsed().as_secs_f64())),
        Ok(d) => Outcome::Fail(format!("{d}, but took {:.0} s", start.elapsed().as_secs_f64())),
        Err(e) => Outcome::Fail(e),
    }
}

/// Plain prototypical classification: class means and squared Euclidean
/// distance, first index on ties.
fn vanilla(emb: &[Vec<f64>], n: usize, k: usize, queries: std::ops::Range<usize>) -> Vec<usize> {
    let d = emb[0].len();
    let means: Vec<Vec<f64>> = (0..n)
        .map(|c| (0..d).map(|j| (c * k..(c + 1) * k).map(|r| emb[r][j]).sum::<f64>() / k as f64).collect())
        .collect();
    queries
        .map(|r| {
            let dist = |m: &Vec<f64>| m.iter().zip(&emb[r]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            (0..n).fold(0, |best, c| if dist(&means[c]) < dist(&means[best]) { c } else { best })
        })
        .collect()
}

fn vanilla_reduction(suite: &mut Suite) -> Outcome {
    let mut run = || -> Result<String, String> {
        let (_, test) = suite.caches()?;
        let data = read_cache(&test).map_err(|e| e.to_string())?;
        let config = ModelConfig {
            encoder: EncoderConfig::new(Arch::Small, 32, CovarianceKind::Radius),
            covariance_transform: CovarianceTransform::SoftplusOffset,
            distance: DistanceTransform::Linear,
        };
        let model = Model::<f32>::build(config, 3).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut queries = 0;
        for i in 0..100 {
            let spec = EpisodeSpec::new(rng.random_range(2..=20), rng.random_range(1..=5), rng.random_range(1..=5));
            let ep = sample_episode(&data, spec, &mut rng).map_err(|e| e.to_string())?;
            let emb = model.embed(&ep.images(&data), false).map_err(|e| e.to_string())?.embeddings;
            let layout = ep.layout();
            let mut tape = Tape::<f64>::new();
            let flat: Vec<f64> = emb.iter().flatten().copied().collect();
            let x = tape.constant(Tensor::new([emb.len(), emb[0].len()], flat).unwrap());
            let ones = tape.constant(Tensor::full([emb.len(), emb[0].len()], 1.0));
            let out = episode_forward(&mut tape, x, Some(ones), &layout, DistanceTransform::Squared).map_err(|e| e.to_string())?;
            let want = vanilla(&emb, spec.n_classes, spec.n_support, layout.query_rows[0]..emb.len());
            if out.predictions != want {
                return Err(format!("episode {i}: decisions differ"));
            }
            queries += want.len();
        }
        Ok(format!("100 episodes, {queries} identical decisions"))
    };
    match run() {
        Ok(d) => Outcome::Pass(d),
        Err(e) => Outcome::Fail(e),
    }
}

fn smoke(suite: &mut Suite) -> Outcome {
    let start = Instant::now();
    let mut passes = 0;
    let mut detail = String::new();
    for seed in 0..5u64 {
        let res = (|| -> Result<(f64, f64), String> {
            let run = suite.smoke_run(seed)?;
            let metrics = gpn::runlog::read_metrics(&run.join("metrics.csv")).map_err(|e| e.to_string())?;
            let tail = &metrics[metrics.len().saturating_sub(100)..];
            let train_acc = tail.iter().map(|r| r.train_acc).sum::<f64>() / tail.len() as f64;
            let (_, test) = suite.caches()?;
            let report = run.join("eval.json");
            let ckpt = run.join("checkpoints").join(gpn::runlog::checkpoint_name(1500));
            let seed = seed.to_string();
            gpn(&["eval", "--checkpoint", s(&ckpt), "--cache", s(&test), "--n-way", "5", "--ks", "1",
                  "--episodes", "200", "--seed", &seed, "--out", s(&report)])?;
            let acc = mean_at(&read_json(&report)?, 1).ok_or("report has no 1-shot result")?;
            Ok((train_acc, acc))
        })();
        match res {
            Ok((train_acc, acc)) => {
                let ok = train_acc >= 0.50 && acc >= 0.80;
                passes += ok as usize;
                let _ = write!(detail, "seed {seed}: train {train_acc:.3} test {acc:.3}{}; ", if ok { "" } else { " (low)" });
            }
            Err(e) => {
                let _ = write!(detail, "seed {seed}: {e}; ");
            }
        }
    }
    let detail = format!("{detail}{passes}/5 seeds in {:.1} min", start.elapsed().as_secs_f64() / 60.0);
    if passes >= 4 {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn full_reproduction() -> Outcome {
    let Ok(path) = std::env::var("GPN_FULL_EVAL") else {
        return Outcome::Skip("optional; set GPN_FULL_EVAL to a best-5 report from configs/full_regime.json".into());
    };
    match read_json(Path::new(&path)) {
        Err(e) => Outcome::Fail(e),
        Ok(report) => match (mean_at(&report, 1), report["config"]["n_way"].as_u64()) {
            (Some(m), Some(20)) => {
                let detail = format!("20-way 1-shot {:.2}% vs 95.64% +/- 1.0", 100.0 * m);
                if (100.0 * m - 95.64).abs() <= 1.0 {
                    Outcome::Pass(detail)
                } else {
                    Outcome::Fail(detail)
                }
            }
            _ => Outcome::Fail("report lacks a 20-way 1-shot result".into()),
        },
    }
}

/// Aligned tail masses `(clean, damaged)` above the mode from an exported CSV.
fn tail_masses(csv: &Path) -> Result<(f64, f64), String> {
    let text = std::fs::read_to_string(csv).map_err(|e| e.to_string())?;
    let (mut tot, mut above) = ([0.0; 2], [0.0; 2]);
    for line in text.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let offset: i64 = f[0].parse().map_err(|_| format!("bad row {line}"))?;
        for j in 0..2 {
            let n: f64 = f[2 + j].parse().map_err(|_| format!("bad row {line}"))?;
            tot[j] += n;
            if offset > 0 {
                above[j] += n;
            }
        }
    }
    Ok((above[0] / tot[0], above[1] / tot[1]))
}

fn damage_histogram(suite: &mut Suite) -> Outcome {
    let mut run = || -> Result<(f64, f64), String> {
        let base = suite.smoke_run(0)?;
        let cfg_path = suite.smoke_config(0)?;
        let mut cfg = read_json(&cfg_path)?;
        // 100 classes x 20 images at 120 images per episode: 17 episodes
        // per epoch, so the damage starts right after the resumed episode 1500.
        cfg["train"]["max_episodes"] = json!(1800);
        cfg["output_dir"] = json!(suite.dir.path().join("damage"));
        cfg["damage"] = json!({ "phases": [{ "start_epoch": 89, "end_epoch": 1000, "rules": [
            { "fraction": 0.25, "target_size": 24 },
            { "fraction": 0.15, "target_size": 20 },
            { "fraction": 0.1, "target_size": 16 }
        ]}]});
        let path = suite.dir.path().join("damage.json");
        std::fs::write(&path, cfg.to_string()).map_err(|e| e.to_string())?;
        let resume = base.join("checkpoints").join(gpn::runlog::checkpoint_name(1500));
        gpn(&["train", "--config", s(&path), "--resume", s(&resume), "--log-every", "0"])?;
        let ckpt = suite.dir.path().join("damage/checkpoints").join(gpn::runlog::checkpoint_name(1800));
        let (_, test) = suite.caches()?;
        let csv = suite.dir.path().join("cov_hist.csv");
        gpn(&["export", "--kind", "cov-hist", "--checkpoint", s(&ckpt), "--cache", s(&test), "--images", "4000",
              "--damage-copy", "--out", s(&csv)])?;
        tail_masses(&csv)
    };
    match run() {
        Ok((clean, damaged)) => {
            let detail = format!("above-mode tail mass clean {clean:.4} damaged {damaged:.4}");
            if damaged > clean {
                Outcome::Pass(detail)
            } else {
                Outcome::Fail(detail)
            }
        }
        Err(e) => Outcome::Fail(e),
    }
}

/// Independent noise images: an encoder sees nothing that separates classes.
fn noise_cache(path: &Path, n_classes: usize, per_class: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = (0..n_classes).map(|c| ClassInfo::new("Noise", &format!("character{c:03}"), 0)).collect();
    let pixels = (0..n_classes * per_class * IMAGE_PIXELS).map(|_| rng.random_range(-0.5..0.5)).collect();
    let ds = Dataset::new(Split::Test, per_class, classes, pixels).map_err(|e| e.to_string())?;
    write_cache(&ds, path).map_err(|e| e.to_string())
}

fn eval_protocol(suite: &mut Suite) -> Outcome {
    let run = || -> Result<String, String> {
        let dir = suite.dir.path().join("chance");
        std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        let cache = dir.join("noise.bin");
        noise_cache(&cache, 500, 4, 100)?;
        let cfg = json!({
            "data": { "train_cache": cache, "test_cache": cache },
            "model": { "encoder": { "arch": "small", "embedding_dim": 16, "covariance": "radius" } },
            "train": { "spec": { "n_classes": 5, "n_support": 1, "n_query": 1 }, "max_episodes": 0 },
            "eval": { "n_way": 5, "ks": [1, 3], "episodes_per_point": 300 },
            "output_dir": dir.join("run"),
            "seeds": { "data": 0, "model": 0, "eval": 3 }
        });
        let cfg_path = dir.join("config.json");
        std::fs::write(&cfg_path, cfg.to_string()).map_err(|e| e.to_string())?;
        gpn(&["train", "--config", s(&cfg_path), "--log-every", "0"])?;
        let ckpt = dir.join("run/checkpoints").join(gpn::runlog::checkpoint_name(0));
        let mut detail = String::new();
        let mut ok = true;
        for n_way in ["5", "20"] {
            let out = |tag: &str| dir.join(format!("eval{n_way}_{tag}.json"));
            for tag in ["a", "b"] {
                gpn(&["eval", "--checkpoint", s(&ckpt), "--cache", s(&cache), "--config", s(&cfg_path),
                      "--n-way", n_way, "--out", s(&out(tag))])?;
            }
            let (a, b) = (std::fs::read(out("a")).unwrap(), std::fs::read(out("b")).unwrap());
            if a != b {
                ok = false;
                let _ = write!(detail, "{n_way}-way reports differ; ");
            }
            let report = read_json(&out("a"))?;
            let chance = 1.0 / n_way.parse::<f64>().unwrap();
            for r in report["results"].as_array().ok_or("report has no results")? {
                let (m, sd, n) = (r["mean"].as_f64().unwrap(), r["std"].as_f64().unwrap(), r["episodes"].as_f64().unwrap());
                let se = sd / n.sqrt();
                let within = (m - chance).abs() <= 3.0 * se;
                ok &= within;
                let _ = write!(detail, "{n_way}-way {}-shot {m:.4} ({:+.1} se); ", r["k"], (m - chance) / se);
            }
        }
        let detail = format!("{detail}reports byte-identical: {}", !detail.contains("differ"));
        if ok {
            Ok(detail)
        } else {
            Err(detail)
        }
    };
    match run() {
        Ok(d) => Outcome::Pass(d),
        Err(e) => Outcome::Fail(e),
    }
}

fn main() -> ExitCode {
    // `cargo test -- --list` and filters are passed to every target.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let selected: Option<Vec<u32>> = std::env::var("GPN_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: u32| selected.as_ref().is_none_or(|s| s.contains(&n));
    let mut suite = Suite { dir: tempfile::tempdir().expect("temp dir"), caches: None, seed0_run: None };

    let criteria: [(u32, &str, bool); 9] = [
        (1, "gradient correctness", true),
        (2, "prototype and distance math", true),
        (3, "covariance transform bounds", true),
        (4, "dataset counts", true),
        (5, "vanilla reduction", true),
        (6, "desk-scale learning", true),
        (7, "full-scale reproduction", false),
        (8, "damage histogram tail", true),
        (9, "evaluation determinism and chance", true),
    ];
    let mut failed = false;
    for (n, name, gating) in criteria {
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let outcome = match n {
            1 => gradients(),
            2 => prototype_math(),
            3 => transforms(),
            4 => dataset_counts(&mut suite),
            5 => vanilla_reduction(&mut suite),
            6 => smoke(&mut suite),
            7 => full_reproduction(),
            8 => damage_histogram(&mut suite),
            _ => eval_protocol(&mut suite),
        };
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Skip(d) => ("SKIP", d),
            Outcome::Fail(d) => {
                failed |= gating;
                (if gating { "FAIL" } else { "FAIL (not gating)" }, d)
            }
        };
        println!("criterion {n} [{tag}] {name}: {detail} ({secs:.1} s)");
    }
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
