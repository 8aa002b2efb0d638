//! Episode sampling, the learning-rate schedule and the training loop.

use std::sync::atomic::{AtomicBool, Ordering};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamState};
use crate::autodiff::Tape;
use crate::data::{apply_damage, DamageSchedule, DamagedView, Dataset, ImageSource};
use crate::encoder::{NormStats, IMAGE_PIXELS, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::head::{episode_forward, EpisodeLayout};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSpec {
    pub n_classes: usize,
    pub n_support: usize,
    pub n_query: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        EpisodeSpec { n_classes: 60, n_support: 1, n_query: 19 }
    }
}

impl EpisodeSpec {
    pub fn new(n_classes: usize, n_support: usize, n_query: usize) -> Self {
        EpisodeSpec { n_classes, n_support, n_query }
    }

    pub fn per_class(&self) -> usize {
        self.n_support + self.n_query
    }

    pub fn n_images(&self) -> usize {
        self.n_classes * self.per_class()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.n_support == 0 || self.n_query == 0 {
            return Err(Error::Config(format!(
                "episodes need n_classes >= 2, n_support >= 1 and n_query >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// One sampled episode. Support and query entries are `(class, example)`
/// pairs grouped by episode label: entry `j` of label `c` is at
/// `c * n_support + j` (resp. `c * n_query + j`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub spec: EpisodeSpec,
    pub classes: Vec<usize>,
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
}

impl Episode {
    /// Row layout of [`Episode::images`]: support rows first, then queries.
    pub fn layout(&self) -> EpisodeLayout {
        let (ns, nq) = (self.spec.n_support, self.spec.n_query);
        let n_sup = self.support.len();
        EpisodeLayout {
            n_classes: self.classes.len(),
            support_rows: (0..n_sup).collect(),
            support_labels: (0..n_sup).map(|i| i / ns).collect(),
            query_rows: (n_sup..n_sup + self.query.len()).collect(),
            query_labels: (0..self.query.len()).map(|i| i / nq).collect(),
        }
    }

    /// Pixels of all support images followed by all query images.
    pub fn images(&self, source: &impl ImageSource) -> Vec<f32> {
        let mut out = Vec::with_capacity((self.support.len() + self.query.len()) * IMAGE_PIXELS);
        for &(c, e) in self.support.iter().chain(&self.query) {
            out.extend_from_slice(source.image(c, e));
        }
        out
    }
}

/// Draws `n_classes` distinct classes and, within each, `n_support +
/// n_query` distinct examples; the first `n_support` become support points.
pub fn sample_episode(source: &impl ImageSource, spec: EpisodeSpec, rng: &mut impl Rng) -> Result<Episode> {
    spec.validate()?;
    let (nc, epc) = (source.n_classes(), source.examples_per_class());
    if spec.n_classes > nc {
        return Err(Error::Sampling(format!("{} classes requested but the dataset has {nc}", spec.n_classes)));
    }
    if spec.per_class() > epc {
        return Err(Error::Sampling(format!(
            "{} support + {} query examples requested but classes have {epc}",
            spec.n_support, spec.n_query
        )));
    }
    let classes = index::sample(rng, nc, spec.n_classes).into_vec();
    let mut support = Vec::with_capacity(spec.n_classes * spec.n_support);
    let mut query = Vec::with_capacity(spec.n_classes * spec.n_query);
    for &c in &classes {
        let picks = index::sample(rng, epc, spec.per_class()).into_vec();
        support.extend(picks[..spec.n_support].iter().map(|&e| (c, e)));
        query.extend(picks[spec.n_support..].iter().map(|&e| (c, e)));
    }
    Ok(Episode { spec, classes, support, query })
}

fn default_initial_lr() -> f64 {
    2e-3
}
fn default_halve_every() -> u64 {
    2000
}
fn default_checkpoint_every() -> u64 {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_initial_lr")]
    pub initial_lr: f64,
    #[serde(default = "default_halve_every")]
    pub halve_every: u64,
    #[serde(default)]
    pub spec: EpisodeSpec,
    pub max_episodes: u64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    /// Seeds episode sampling and damage selection.
    pub seed: u64,
    /// Store Adam moments in checkpoints so training can be resumed.
    #[serde(default)]
    pub save_optimizer: bool,
}

impl TrainConfig {
    pub fn new(max_episodes: u64, seed: u64) -> Self {
        TrainConfig {
            initial_lr: default_initial_lr(),
            halve_every: default_halve_every(),
            spec: EpisodeSpec::default(),
            max_episodes,
            checkpoint_every: default_checkpoint_every(),
            seed,
            save_optimizer: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.initial_lr > 0.0) || !self.initial_lr.is_finite() {
            problems.push(format!("initial_lr must be positive, got {}", self.initial_lr));
        }
        if self.halve_every == 0 {
            problems.push("halve_every must be positive".to_string());
        }
        if self.checkpoint_every == 0 {
            problems.push("checkpoint_every must be positive".to_string());
        }
        if let Err(Error::Config(m)) = self.spec.validate() {
            problems.push(m);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// `initial_lr * 0.5^floor(episode / halve_every)`.
pub fn lr_at(episode: u64, config: &TrainConfig) -> f64 {
    let halvings = (episode / config.halve_every).min(1074) as i32;
    config.initial_lr * 0.5f64.powi(halvings)
}

/// Episodes per epoch: enough episodes to draw every training image once.
pub fn episodes_per_epoch(n_images: usize, spec: &EpisodeSpec) -> u64 {
    n_images.div_ceil(spec.n_images()).max(1) as u64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub episode: u64,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
}

/// Receives training progress. Checkpoint and metrics writers implement it.
pub trait TrainObserver {
    fn episode(&mut self, record: &EpisodeRecord) -> Result<()>;

    /// Called with the number of completed episodes, the mean training
    /// accuracy since the previous checkpoint (`None` before any episode)
    /// and the optimizer state.
    fn checkpoint(
        &mut self,
        episode: u64,
        train_acc: Option<f64>,
        model: &Model<f32>,
        adam: &[AdamState<f32>],
    ) -> Result<()>;

    /// Called with the last good parameters before training aborts.
    fn aborted(&mut self, _episode: u64, _model: &Model<f32>, _reason: &str) -> Result<()> {
        Ok(())
    }
}

/// Collects records in memory.
#[derive(Clone, Debug, Default)]
pub struct MemoryObserver {
    pub records: Vec<EpisodeRecord>,
    pub checkpoints: Vec<(u64, Option<f64>, Model<f32>)>,
}

impl TrainObserver for MemoryObserver {
    fn episode(&mut self, record: &EpisodeRecord) -> Result<()> {
        self.records.push(*record);
        Ok(())
    }

    fn checkpoint(&mut self, episode: u64, acc: Option<f64>, model: &Model<f32>, _: &[AdamState<f32>]) -> Result<()> {
        self.checkpoints.push((episode, acc, model.clone()));
        Ok(())
    }
}

/// Episodic trainer over one training dataset.
pub struct Trainer<'a> {
    pub model: Model<f32>,
    pub adam: Vec<AdamState<f32>>,
    pub config: TrainConfig,
    pub episode: u64,
    dataset: &'a Dataset,
    schedule: DamageSchedule,
    view: Option<(usize, DamagedView<'a>)>,
    rng: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    pub fn new(model: Model<f32>, dataset: &'a Dataset, config: TrainConfig, schedule: DamageSchedule) -> Result<Self> {
        config.validate()?;
        schedule.validate()?;
        let adam = model.named_tensors().iter().map(|(_, t)| AdamState::for_param(t)).collect();
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer { model, adam, config, episode: 0, dataset, schedule, view: None, rng })
    }

    /// Continues from a saved episode counter and optimizer state. The
    /// episode sampler is re-seeded from the seed and the episode index.
    pub fn resume(&mut self, episode: u64, adam: Option<Vec<AdamState<f32>>>) {
        self.episode = episode;
        if let Some(a) = adam {
            self.adam = a;
        }
        self.rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ episode.rotate_left(32));
    }

    pub fn epoch(&self) -> u64 {
        self.episode / episodes_per_epoch(self.dataset.n_images(), &self.config.spec)
    }

    /// Number of images damaged in the view used by the next episode.
    pub fn damaged_images(&self) -> usize {
        self.view.as_ref().map_or(0, |(_, v)| v.n_damaged())
    }

    fn refresh_view(&mut self) -> Result<()> {
        let phase = self.schedule.active_phase(self.epoch() as usize);
        match (phase, &self.view) {
            (None, _) => self.view = None,
            (Some(p), Some((current, _))) if *current == p => {}
            (Some(p), _) => {
                let seed = self.config.seed ^ 0xDA_3A6E ^ (p as u64).wrapping_mul(0x9E37_79B9);
                let view = apply_damage(self.dataset, &self.schedule.phases[p].rules, seed)?;
                self.view = Some((p, view));
            }
        }
        Ok(())
    }

    /// Runs one training episode and applies the Adam update.
    pub fn step(&mut self) -> Result<EpisodeRecord> {
        self.refresh_view()?;
        let spec = self.config.spec;
        let (ep, images) = match &self.view {
            Some((_, v)) => {
                let ep = sample_episode(v, spec, &mut self.rng)?;
                let imgs = ep.images(v);
                (ep, imgs)
            }
            None => {
                let ep = sample_episode(self.dataset, spec, &mut self.rng)?;
                let imgs = ep.images(self.dataset);
                (ep, imgs)
            }
        };
        let lr = lr_at(self.episode, &self.config);
        let n = spec.n_images();

        let mut tape = Tape::<f32>::new();
        let vars = self.model.attach(&mut tape, true);
        let x = tape.constant(Tensor::new([n, IMAGE_SIDE, IMAGE_SIDE, 1], images)?);
        let out = self.model.forward(&mut tape, &vars, x, false)?;
        let head = episode_forward(&mut tape, out.embeddings, out.inv_cov, &ep.layout(), self.model.config.distance)?;
        let loss = tape.value(head.loss).data()[0] as f64;
        let grads = tape.backward(head.loss)?;

        let param_vars = vars.param_vars();
        for ((t, state), v) in self.model.tensors_mut().into_iter().zip(&mut self.adam).zip(param_vars) {
            if let Some(v) = v {
                grads.accumulate_into(v, t)?;
                adam_step(t, state, lr)?;
            }
        }
        if self.model.config.encoder.norm_stats == NormStats::Running {
            self.model.encoder.update_running_stats(&out.batch_stats);
        }
        let record = EpisodeRecord { episode: self.episode, lr, loss, train_acc: head.accuracy };
        self.episode += 1;
        Ok(record)
    }

    /// Trains until `max_episodes` episodes are done or `stop` is raised.
    /// A checkpoint is written before the first episode, every
    /// `checkpoint_every` episodes and at the end.
    pub fn run(&mut self, observer: &mut dyn TrainObserver, stop: Option<&AtomicBool>) -> Result<()> {
        if self.episode == 0 {
            observer.checkpoint(0, None, &self.model, &self.adam)?;
        }
        let mut window = Vec::new();
        let mut last_ckpt = self.episode;
        while self.episode < self.config.max_episodes {
            if stop.is_some_and(|s| s.load(Ordering::SeqCst)) {
                break;
            }
            let record = match self.step() {
                Ok(r) => r,
                Err(e) => {
                    let reason = e.to_string();
                    observer.aborted(self.episode, &self.model, &reason)?;
                    return Err(Error::TrainingAborted { episode: self.episode as usize, reason });
                }
            };
            observer.episode(&record)?;
            window.push(record.train_acc);
            if self.episode % self.config.checkpoint_every == 0 {
                let acc = window.iter().sum::<f64>() / window.len() as f64;
                observer.checkpoint(self.episode, Some(acc), &self.model, &self.adam)?;
                window.clear();
                last_ckpt = self.episode;
            }
        }
        if self.episode != last_ckpt {
            let acc = (!window.is_empty()).then(|| window.iter().sum::<f64>() / window.len() as f64);
            observer.checkpoint(self.episode, acc, &self.model, &self.adam)?;
        }
        Ok(())
    }
}
