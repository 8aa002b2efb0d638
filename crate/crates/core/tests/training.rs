use gpn::data::{ClassInfo, ImageSource, DamagePhase, DamageRule, DamageSchedule, Dataset, Split};
use gpn::encoder::{Arch, CovarianceKind, EncoderConfig, IMAGE_PIXELS};
use gpn::episodes::{EpisodeSpec, MemoryObserver, TrainConfig, Trainer};
use gpn::head::{CovarianceTransform, DistanceTransform};
use gpn::model::{Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;

fn model_config(dim: usize, kind: CovarianceKind) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig::new(Arch::Small, dim, kind),
        covariance_transform: CovarianceTransform::SoftplusOffset,
        distance: DistanceTransform::Linear,
    }
}

/// Images of i.i.d. noise: nothing distinguishes one class from another.
fn noise_dataset(n_classes: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = (0..n_classes).map(|c| ClassInfo::new("Noise", &format!("character{c:02}"), 0)).collect();
    let pixels = (0..n_classes * 20 * IMAGE_PIXELS).map(|_| rng.random_range(-0.5..0.5)).collect();
    Dataset::new(Split::Train, 20, classes, pixels).unwrap()
}

fn trainer(ds: &Dataset, model: ModelConfig, spec: EpisodeSpec, episodes: u64, seed: u64) -> Trainer<'_> {
    let mut cfg = TrainConfig::new(episodes, seed);
    cfg.spec = spec;
    Trainer::new(Model::build(model, seed).unwrap(), ds, cfg, DamageSchedule::default()).unwrap()
}

#[test]
fn fresh_model_loss_is_near_uniform_on_uninformative_images() {
    let ds = noise_dataset(60, 1);
    let ln60 = 60f64.ln();
    for seed in 0..3 {
        let mut t = trainer(&ds, model_config(64, CovarianceKind::Radius), EpisodeSpec::default(), 1, seed);
        let loss = t.step().unwrap().loss;
        assert!((loss - ln60).abs() <= 1.0, "seed {seed}: initial loss {loss}");
    }
}

#[test]
fn zero_episodes_only_writes_the_initial_checkpoint() {
    let ds = noise_dataset(8, 2);
    let cfg = model_config(8, CovarianceKind::Radius);
    let initial = Model::build(cfg.clone(), 5).unwrap();
    let mut t = trainer(&ds, cfg, EpisodeSpec::new(4, 1, 2), 0, 5);
    let mut obs = MemoryObserver::default();
    t.run(&mut obs, None).unwrap();
    assert!(obs.records.is_empty());
    assert_eq!(obs.checkpoints.len(), 1);
    assert_eq!(obs.checkpoints[0].0, 0);
    assert_eq!(obs.checkpoints[0].2, initial);
}

#[test]
fn training_is_deterministic_per_seed() {
    let ds = common::fixture_train(2);
    let run = |seed| {
        let mut t = trainer(&ds, model_config(16, CovarianceKind::Radius), EpisodeSpec::new(10, 1, 3), 4, seed);
        let mut obs = MemoryObserver::default();
        t.run(&mut obs, None).unwrap();
        (obs.records, t.model)
    };
    let (a, b, c) = (run(3), run(3), run(4));
    assert_eq!(a, b);
    assert_ne!(a.0, c.0);
}

#[test]
fn checkpoints_carry_window_accuracy() {
    let ds = common::fixture_train(2);
    let mut cfg = TrainConfig::new(5, 0);
    cfg.spec = EpisodeSpec::new(8, 1, 2);
    cfg.checkpoint_every = 2;
    let model = Model::build(model_config(8, CovarianceKind::Vanilla), 0).unwrap();
    let mut t = Trainer::new(model, &ds, cfg, DamageSchedule::default()).unwrap();
    let mut obs = MemoryObserver::default();
    t.run(&mut obs, None).unwrap();
    let eps: Vec<u64> = obs.checkpoints.iter().map(|c| c.0).collect();
    assert_eq!(eps, vec![0, 2, 4, 5]);
    let acc = &obs.records;
    let expect = (acc[2].train_acc + acc[3].train_acc) / 2.0;
    assert_eq!(obs.checkpoints[2].1, Some(expect));
}

#[test]
fn damage_phase_switches_the_view() {
    let ds = common::fixture_train(1);
    let spec = EpisodeSpec::new(8, 1, 2);
    // 30 alphabets x 4 rotations x 20 images / 24 per episode.
    let per_epoch = gpn::episodes::episodes_per_epoch(ds.n_images(), &spec);
    assert_eq!(per_epoch, 100);
    let schedule = DamageSchedule {
        phases: vec![DamagePhase {
            start_epoch: 1,
            end_epoch: 2,
            rules: vec![DamageRule { fraction: 0.1, target_size: 12 }],
        }],
    };
    let mut cfg = TrainConfig::new(3 * per_epoch, 0);
    cfg.spec = spec;
    let model = Model::build(model_config(8, CovarianceKind::Radius), 0).unwrap();
    let mut t = Trainer::new(model, &ds, cfg, schedule).unwrap();
    let mut seen = Vec::new();
    for _ in 0..3 * per_epoch {
        t.step().unwrap();
        seen.push((t.episode - 1, t.damaged_images()));
    }
    for (ep, damaged) in seen {
        let expected = if ep / per_epoch == 1 { ds.n_images() / 10 } else { 0 };
        assert_eq!(damaged, expected, "episode {ep}");
    }
}

/// A 500-episode smoke run must beat ten times chance. One query per class
/// keeps the run short; the support side matches full-scale training.
#[test]
fn short_run_learns_well_above_chance() {
    let ds = common::fixture_train(4);
    let ds = ds.subset(&(0..100).collect::<Vec<_>>()).unwrap();
    let mut t = trainer(&ds, model_config(32, CovarianceKind::Radius), EpisodeSpec::new(60, 1, 1), 500, 11);
    let mut obs = MemoryObserver::default();
    t.run(&mut obs, None).unwrap();
    let tail = &obs.records[450..];
    let mean = tail.iter().map(|r| r.train_acc).sum::<f64>() / tail.len() as f64;
    assert!(mean > 10.0 / 60.0, "final 50-episode accuracy {mean}");
}
