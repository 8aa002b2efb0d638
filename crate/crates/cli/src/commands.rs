use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use gpn::adam::AdamState;
use gpn::checkpoint;
use gpn::config::RunConfig;
use gpn::data::synthetic::{write_fixture, FixtureSpec};
use gpn::data::{apply_damage, ingest, prepare_split, read_cache, write_cache, Dataset, ImageSource, IngestMode, Split};
use gpn::episodes::{EpisodeRecord, TrainObserver, Trainer};
use gpn::eval::{
    aggregate_best5, checkpoint_scores, embed_images, evaluate, export_cov_histogram, export_pca, sorted_json,
    EvalConfig, EvalReport, PointMeta,
};
use gpn::model::Model;
use gpn::runlog::{list_checkpoints, read_metrics, RunDir};

use crate::{EvalArgs, ExportArgs, ExportKind, Failure, FixtureArgs, PrepareArgs, TrainArgs};

type CmdResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

fn require(path: &Path, what: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{what} not found: {}", path.display())))
    }
}

/// Keeps freed training buffers in the heap instead of returning them to
/// the kernel after every episode; the per-episode allocation pattern
/// otherwise spends a large share of time in page faults.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator parameters and is called
    // before any other thread exists.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}

fn unix_time() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display())).map_err(Failure::Runtime)
}

pub fn prepare(args: PrepareArgs) -> CmdResult {
    if !args.omniglot_dir.is_dir() {
        return Err(usage(format!("Omniglot directory not found: {}", args.omniglot_dir.display())));
    }
    let mode = if args.lenient { IngestMode::Lenient } else { IngestMode::Standard };
    let raw = ingest(&args.omniglot_dir, mode)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    for (split, classes, ext) in [(Split::Train, &raw.train, "train.bin"), (Split::Test, &raw.test, "test.bin")] {
        let mut ds = prepare_split(classes, split)?;
        if !args.no_augment {
            ds = ds.augment_rotations()?;
        }
        let path = args.out.with_extension(ext);
        write_cache(&ds, &path)?;
        println!(
            "{split:?}: {} base classes, {} classes, {} images -> {}",
            ds.n_base_classes(),
            ds.n_classes(),
            ds.n_images(),
            path.display()
        );
    }
    Ok(())
}

pub fn fixture(args: FixtureArgs) -> CmdResult {
    let spec = match args.max_chars {
        Some(n) => FixtureSpec::truncated(args.seed, n),
        None => FixtureSpec::standard(args.seed),
    };
    let s = write_fixture(&args.out, &spec)?;
    println!(
        "fixture: {} train classes, {} test classes, {} images -> {}",
        s.train_classes,
        s.test_classes,
        s.images,
        args.out.display()
    );
    Ok(())
}

/// Forwards to the run directory and prints progress.
struct Progress {
    run: RunDir,
    log_every: u64,
    last_lr: f64,
}

impl TrainObserver for Progress {
    fn episode(&mut self, r: &EpisodeRecord) -> gpn::Result<()> {
        if r.lr != self.last_lr || (self.log_every > 0 && r.episode % self.log_every == 0) {
            eprintln!("episode {} lr {:e} loss {:.4} train_acc {:.4}", r.episode, r.lr, r.loss, r.train_acc);
            self.last_lr = r.lr;
        }
        self.run.episode(r)
    }

    fn checkpoint(
        &mut self,
        episode: u64,
        acc: Option<f64>,
        model: &Model<f32>,
        adam: &[AdamState<f32>],
    ) -> gpn::Result<()> {
        self.run.checkpoint(episode, acc, model, adam)
    }

    fn aborted(&mut self, episode: u64, model: &Model<f32>, reason: &str) -> gpn::Result<()> {
        self.run.aborted(episode, model, reason)
    }
}

fn load_train_set(config: &RunConfig) -> Result<Dataset, Failure> {
    require(&config.data.train_cache, "training cache")?;
    let ds = read_cache(&config.data.train_cache)?;
    match config.data.train_classes {
        Some(n) if n > ds.n_classes() => Err(usage(format!(
            "data.train_classes = {n} but {} holds {} classes",
            config.data.train_cache.display(),
            ds.n_classes()
        ))),
        Some(n) => Ok(ds.subset(&(0..n).collect::<Vec<_>>())?),
        None => Ok(ds),
    }
}

pub fn train(args: TrainArgs) -> CmdResult {
    require(&args.config, "config")?;
    let mut config = RunConfig::load(&args.config)?;
    if let Some(d) = args.output_dir {
        config.output_dir = d;
    }
    if let Some(n) = args.max_episodes {
        config.train.max_episodes = n;
    }
    if let Some(n) = args.train_classes {
        config.data.train_classes = Some(n);
    }
    if let Some(s) = args.data_seed {
        config.seeds.data = s;
    }
    if let Some(s) = args.model_seed {
        config.seeds.model = s;
    }
    config.validate()?;
    let dataset = load_train_set(&config)?;

    let (model, resume) = match &args.resume {
        Some(path) => {
            require(path, "checkpoint")?;
            let ck = checkpoint::load(path)?;
            if ck.model.config != config.model {
                return Err(usage(format!("{} was trained with a different model config", path.display())));
            }
            (ck.model, Some((ck.header.episode, ck.adam)))
        }
        None => (Model::build(config.model.clone(), config.seeds.model)?, None),
    };

    let out = &config.output_dir;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_file(&out.join("config.json"), &sorted_json(&config)?)?;
    let started = unix_time();
    let info = |finished: Option<u64>, status: &str| {
        serde_json::json!({ "started_unix": started, "finished_unix": finished, "status": status }).to_string()
    };
    write_file(&out.join("run_info.json"), &info(None, "running"))?;

    let mut trainer = Trainer::new(model, &dataset, config.train_config(), config.damage.clone())?;
    if let Some((episode, adam)) = resume {
        if adam.is_none() {
            eprintln!("warning: checkpoint has no optimizer state; Adam restarts from zero moments");
        }
        trainer.resume(episode, adam);
    }
    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = stop.clone();
        ctrlc::set_handler(move || stop.store(true, Ordering::SeqCst)).context("installing the interrupt handler")?;
    }
    let run = RunDir::create(out, config.seeds.data, config.train.save_optimizer, args.resume.is_some())?;
    let mut progress = Progress { run, log_every: args.log_every, last_lr: f64::NAN };
    eprintln!(
        "training on {} classes ({} images) for {} episodes -> {}",
        dataset.n_classes(),
        dataset.n_images(),
        config.train.max_episodes,
        out.display()
    );
    let result = trainer.run(&mut progress, Some(&stop));
    let interrupted = stop.load(Ordering::SeqCst);
    let status = match (&result, interrupted) {
        (Err(_), _) => "aborted",
        (Ok(()), true) => "interrupted",
        (Ok(()), false) => "finished",
    };
    write_file(&out.join("run_info.json"), &info(Some(unix_time()), status))?;
    result?;
    eprintln!("{status} after {} episodes", trainer.episode);
    Ok(())
}

fn eval_config(args: &EvalArgs) -> Result<EvalConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => {
            require(path, "config")?;
            RunConfig::load(path)?.eval_config()
        }
        None => {
            let n_way = args.n_way.ok_or_else(|| usage("--n-way is required without --config"))?;
            EvalConfig::new(n_way, 0)
        }
    };
    if let Some(n) = args.n_way {
        cfg.n_way = n;
    }
    if let Some(ks) = &args.ks {
        cfg.ks = ks.clone();
    }
    if let Some(e) = args.episodes {
        cfg.episodes_per_point = e;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.threads = args.threads.max(1);
    Ok(cfg)
}

fn checkpoint_label(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn print_rows(points: &[gpn::eval::EvalPoint], label: &str) {
    for k in [1, 5] {
        if let Some(p) = points.iter().find(|p| p.k == k) {
            println!(
                "{label} {}-way {k}-shot: {:.2}% +/- {:.2}% ({} episodes)",
                p.n_way,
                100.0 * p.mean,
                100.0 * p.std,
                p.episodes
            );
        }
    }
}

pub fn eval(args: EvalArgs) -> CmdResult {
    require(&args.checkpoint, "checkpoint")?;
    require(&args.cache, "test cache")?;
    let config = eval_config(&args)?;
    let test = read_cache(&args.cache)?;
    config.validate(test.n_classes(), test.examples_per_class())?;

    let (json, points, label) = if args.best5 {
        let metrics = args
            .metrics
            .as_ref()
            .ok_or_else(|| usage("--best5 ranks checkpoints by training accuracy and needs the training metrics CSV (--metrics)"))?;
        require(metrics, "metrics file")?;
        let dir = if args.checkpoint.join("checkpoints").is_dir() {
            args.checkpoint.join("checkpoints")
        } else {
            args.checkpoint.clone()
        };
        if !dir.is_dir() {
            return Err(usage(format!("--best5 expects a checkpoint directory, got {}", args.checkpoint.display())));
        }
        let ckpts = list_checkpoints(&dir)?;
        let records: Vec<(u64, f64)> = read_metrics(metrics)?.iter().map(|r| (r.episode, r.train_acc)).collect();
        let episodes: Vec<u64> = ckpts.iter().map(|c| c.0).collect();
        let scores = checkpoint_scores(&records, &episodes);
        let report = aggregate_best5(&scores, &config, |ep| {
            let path = &ckpts.iter().find(|c| c.0 == ep).expect("scored checkpoint exists").1;
            let model = checkpoint::load(path)?.model;
            evaluate(&model, &test, &config, &checkpoint_label(path))
        })?;
        (report.to_json()?, report.results, "best-5")
    } else {
        if args.checkpoint.is_dir() {
            return Err(usage(format!("{} is a directory; pass a checkpoint file or --best5", args.checkpoint.display())));
        }
        let model = checkpoint::load(&args.checkpoint)?.model;
        let report: EvalReport = evaluate(&model, &test, &config, &checkpoint_label(&args.checkpoint))?;
        (report.to_json()?, report.results, "checkpoint")
    };
    match &args.out {
        Some(path) => {
            write_file(path, &json)?;
            print_rows(&points, label);
        }
        None => {
            print!("{json}");
        }
    }
    Ok(())
}

pub fn export(args: ExportArgs) -> CmdResult {
    require(&args.checkpoint, "checkpoint")?;
    require(&args.cache, "cache")?;
    let model = checkpoint::load(&args.checkpoint)?.model;
    let data = read_cache(&args.cache)?;
    match args.kind {
        ExportKind::Pca => {
            let count = args.images.unwrap_or(500).min(data.n_images());
            let emb = embed_images(&model, &data, count, args.batch_size)?;
            let epc = data.examples_per_class();
            let mut points = emb.embeddings.clone();
            let mut meta: Vec<PointMeta> = (0..count)
                .map(|i| PointMeta { class_id: data.classes[i / epc].id.clone(), is_prototype: false })
                .collect();
            if args.prototypes {
                let n_classes = count.div_ceil(epc);
                let support: Vec<Vec<usize>> =
                    (0..n_classes).map(|c| (c * epc..((c + 1) * epc).min(count)).collect()).collect();
                for (c, p) in emb.prototypes(&support)?.into_iter().enumerate() {
                    points.push(p.centroid);
                    meta.push(PointMeta { class_id: data.classes[c].id.clone(), is_prototype: true });
                }
            }
            let proj = export_pca(&points)?;
            proj.write_csv(&args.out, &meta)?;
            println!(
                "pca: {} points, explained variance {:.3} -> {}",
                points.len(),
                proj.explained_ratio(),
                args.out.display()
            );
        }
        ExportKind::CovHist => {
            let count = args.images.unwrap_or(data.n_images()).min(data.n_images());
            let clean = if count < data.n_images() {
                data.subset(&(0..count.div_ceil(data.examples_per_class())).collect::<Vec<_>>())?
            } else {
                data
            };
            let (damaged, note) = match (&args.damaged_cache, args.damage_copy) {
                (Some(path), _) => {
                    require(path, "damaged cache")?;
                    (read_cache(path)?, format!("damaged: {}", path.display()))
                }
                (None, true) => {
                    let view = apply_damage(&clean, &args.damage_rules, args.damage_seed)?;
                    let rules: Vec<String> =
                        args.damage_rules.iter().map(|r| format!("{}:{}", r.fraction, r.target_size)).collect();
                    (view.materialize(), format!("damaged copy: rules {} seed {}", rules.join(","), args.damage_seed))
                }
                (None, false) => {
                    return Err(usage("cov-hist compares two datasets; pass --damage-copy or --damaged-cache"));
                }
            };
            let hist = export_cov_histogram(&model, &clean, &damaged, args.batch_size)?;
            hist.write_csv(&args.out, &note)?;
            let (ca, da) = hist.tail_mass_above();
            let (cb, db) = hist.tail_mass_below();
            println!(
                "cov-hist: {} bins of width {:.4e}; above-mode mass clean {ca:.4} damaged {da:.4}; \
                 below-mode mass clean {cb:.4} damaged {db:.4} -> {}",
                hist.rows.len(),
                hist.bin_width,
                args.out.display()
            );
        }
    }
    Ok(())
}
