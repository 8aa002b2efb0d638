//! k-shot evaluation, best-5 aggregation and figure-data exports.

mod histogram;
mod pca;

pub use histogram::{bin_width, cov_values, export_cov_histogram, CovHistogram, HistogramRow};
pub use pca::{export_pca, PcaProjection, PointMeta};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageSource;
use crate::episodes::{sample_episode, Episode, EpisodeSpec};
use crate::error::{Error, Result};
use crate::head::classify_with;
use crate::encoder::IMAGE_PIXELS;
use crate::model::{Embedded, Model};

fn default_ks() -> Vec<usize> {
    (1..=19).collect()
}
fn default_episodes() -> usize {
    1000
}
fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub n_way: usize,
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
    #[serde(default = "default_episodes")]
    pub episodes_per_point: usize,
    pub seed: u64,
    /// Worker threads; results do not depend on it.
    #[serde(skip, default = "one")]
    pub threads: usize,
}

impl EvalConfig {
    pub fn new(n_way: usize, seed: u64) -> Self {
        EvalConfig { n_way, ks: default_ks(), episodes_per_point: default_episodes(), seed, threads: 1 }
    }

    pub fn validate(&self, n_classes: usize, examples_per_class: usize) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_way < 2 {
            problems.push(format!("n_way must be at least 2, got {}", self.n_way));
        }
        if self.n_way > n_classes {
            problems.push(format!("n_way {} exceeds the {n_classes} test classes", self.n_way));
        }
        if self.ks.is_empty() {
            problems.push("no k values to evaluate".to_string());
        }
        if let Some(k) = self.ks.iter().find(|&&k| k == 0 || k >= examples_per_class) {
            problems.push(format!("k = {k} leaves no query points out of {examples_per_class} examples"));
        }
        if self.episodes_per_point == 0 {
            problems.push("episodes_per_point must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub k: usize,
    pub n_way: usize,
    pub n_query: usize,
    pub episodes: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoints: Vec<String>,
    pub config: EvalConfig,
    /// How batch normalization statistics were obtained.
    pub batch_statistics: String,
    pub results: Vec<EvalPoint>,
}

pub const EPISODE_BATCH_NOTE: &str = "each episode's support and query images form one batch";

impl EvalReport {
    pub fn point(&self, k: usize) -> Option<&EvalPoint> {
        self.results.iter().find(|p| p.k == k)
    }

    /// Pretty JSON with keys sorted at every level.
    pub fn to_json(&self) -> Result<String> {
        sorted_json(self)
    }
}

/// Serializes through `serde_json::Value`, whose maps keep keys sorted.
pub fn sorted_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Accuracy of one k-shot episode per sampled episode. Episodes are drawn
/// sequentially from one seeded stream and scored on up to `threads`
/// workers, so the result is independent of the thread count.
pub fn episode_accuracies(
    model: &Model<f32>,
    source: &(impl ImageSource + Sync),
    n_way: usize,
    k: usize,
    episodes: usize,
    seed: u64,
    threads: usize,
) -> Result<Vec<f64>> {
    let spec = EpisodeSpec::new(n_way, k, source.examples_per_class() - k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let sampled = (0..episodes).map(|_| sample_episode(source, spec, &mut rng)).collect::<Result<Vec<_>>>()?;
    let threads = threads.clamp(1, episodes.max(1));
    let chunk = episodes.div_ceil(threads).max(1);
    std::thread::scope(|scope| {
        let workers: Vec<_> = sampled
            .chunks(chunk)
            .map(|eps| scope.spawn(move || eps.iter().map(|ep| episode_accuracy(model, source, ep, k)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(episodes);
        for w in workers {
            out.extend(w.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

fn episode_accuracy(model: &Model<f32>, source: &impl ImageSource, ep: &Episode, k: usize) -> Result<f64> {
    let use_running = model.encoder.blocks.iter().all(|b| b.running.is_some());
    let emb = model.embed(&ep.images(source), use_running)?;
    let layout = ep.layout();
    let support: Vec<Vec<usize>> = (0..ep.spec.n_classes).map(|c| (c * k..(c + 1) * k).collect()).collect();
    let protos = emb.prototypes(&support)?;
    let queries: Vec<&[f64]> = layout.query_rows.iter().map(|&r| emb.embeddings[r].as_slice()).collect();
    let pred = classify_with(&queries, &protos, model.config.distance)?;
    let correct = pred.iter().zip(&layout.query_labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / pred.len() as f64)
}

/// Evaluates a model on held-out classes for every configured k.
pub fn evaluate(
    model: &Model<f32>,
    source: &(impl ImageSource + Sync),
    config: &EvalConfig,
    checkpoint: &str,
) -> Result<EvalReport> {
    config.validate(source.n_classes(), source.examples_per_class())?;
    let mut results = Vec::with_capacity(config.ks.len());
    for &k in &config.ks {
        let accs = episode_accuracies(model, source, config.n_way, k, config.episodes_per_point, config.seed, config.threads)?;
        let (mean, std) = mean_std(&accs);
        results.push(EvalPoint {
            k,
            n_way: config.n_way,
            n_query: source.examples_per_class() - k,
            episodes: accs.len(),
            mean,
            std,
        });
    }
    Ok(EvalReport {
        checkpoints: vec![checkpoint.to_string()],
        config: config.clone(),
        batch_statistics: EPISODE_BATCH_NOTE.to_string(),
        results,
    })
}

/// Embeds the first `count` images of `source` (in class-major order) in
/// consecutive batches of `batch_size`. The last batch absorbs a single
/// leftover image so that no batch has fewer than two images.
pub fn embed_images(model: &Model<f32>, source: &impl ImageSource, count: usize, batch_size: usize) -> Result<Embedded> {
    let epc = source.examples_per_class();
    let n = count.min(source.n_images());
    let batch_size = batch_size.max(2);
    let use_running = model.encoder.blocks.iter().all(|b| b.running.is_some());
    let mut all = Embedded { embeddings: Vec::new(), s_raw: Vec::new(), inv_cov: Vec::new() };
    let mut start = 0;
    while start < n {
        let mut end = (start + batch_size).min(n);
        if n - end == 1 {
            end = n;
        }
        let mut pixels = Vec::with_capacity((end - start) * IMAGE_PIXELS);
        for i in start..end {
            pixels.extend_from_slice(source.image(i / epc, i % epc));
        }
        let emb = model.embed(&pixels, use_running)?;
        all.embeddings.extend(emb.embeddings);
        all.s_raw.extend(emb.s_raw);
        all.inv_cov.extend(emb.inv_cov);
        start = end;
    }
    Ok(all)
}

/// Picks the five highest scores; ties go to the earlier episode.
pub fn select_best5(scores: &[(u64, f64)]) -> Result<Vec<(u64, f64)>> {
    if scores.len() < 5 {
        return Err(Error::Aggregation(format!("best-5 needs at least 5 scored checkpoints, got {}", scores.len())));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    sorted.truncate(5);
    Ok(sorted)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Best5Report {
    /// `(episode, training accuracy)` of the selected checkpoints.
    pub selected: Vec<(u64, f64)>,
    pub config: EvalConfig,
    pub batch_statistics: String,
    /// Mean and standard deviation across the five checkpoints' means.
    pub results: Vec<EvalPoint>,
    pub individual: Vec<EvalReport>,
}

impl Best5Report {
    pub fn to_json(&self) -> Result<String> {
        sorted_json(self)
    }

    pub fn point(&self, k: usize) -> Option<&EvalPoint> {
        self.results.iter().find(|p| p.k == k)
    }
}

/// Evaluates the five best checkpoints with `eval` and aggregates the
/// per-k means.
pub fn aggregate_best5(
    scores: &[(u64, f64)],
    config: &EvalConfig,
    mut eval: impl FnMut(u64) -> Result<EvalReport>,
) -> Result<Best5Report> {
    let selected = select_best5(scores)?;
    let individual = selected.iter().map(|&(ep, _)| eval(ep)).collect::<Result<Vec<_>>>()?;
    let mut results = Vec::new();
    for (i, p) in individual[0].results.iter().enumerate() {
        let means: Vec<f64> = individual.iter().map(|r| r.results[i].mean).collect();
        let (mean, std) = mean_std(&means);
        results.push(EvalPoint { std, mean, episodes: p.episodes * individual.len(), ..p.clone() });
    }
    Ok(Best5Report {
        selected,
        config: config.clone(),
        batch_statistics: EPISODE_BATCH_NOTE.to_string(),
        results,
        individual,
    })
}

/// Mean training accuracy over each checkpoint's window, from per-episode
/// `(episode index, train_acc)` records. Checkpoint `E` covers episode
/// indices in `[previous E, E)`.
pub fn checkpoint_scores(records: &[(u64, f64)], checkpoints: &[u64]) -> Vec<(u64, f64)> {
    let mut cks = checkpoints.to_vec();
    cks.sort_unstable();
    let mut out = Vec::new();
    let mut prev = 0;
    for &c in &cks {
        let window: Vec<f64> = records.iter().filter(|(e, _)| *e >= prev && *e < c).map(|r| r.1).collect();
        if !window.is_empty() {
            out.push((c, window.iter().sum::<f64>() / window.len() as f64));
        }
        prev = c;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn best5_picks_top_scores() {
        let scores: Vec<(u64, f64)> = (1..=7).map(|i| (i * 200, i as f64 / 10.0)).collect();
        let sel: Vec<u64> = select_best5(&scores).unwrap().iter().map(|s| s.0).collect();
        assert_eq!(sel, vec![1400, 1200, 1000, 800, 600]);
    }

    #[test]
    fn best5_tie_prefers_earlier() {
        let scores = [(200, 0.9), (400, 0.8), (600, 0.8), (800, 0.95), (1000, 0.99), (1200, 0.8)];
        let sel: Vec<u64> = select_best5(&scores).unwrap().iter().map(|s| s.0).collect();
        assert_eq!(sel, vec![1000, 800, 200, 400, 600]);
    }

    #[test]
    fn best5_needs_five() {
        assert!(matches!(select_best5(&[(1, 0.1); 4]), Err(Error::Aggregation(_))));
    }

    #[test]
    fn windows_follow_checkpoints() {
        let recs: Vec<(u64, f64)> = (0..6).map(|e| (e, e as f64)).collect();
        assert_eq!(checkpoint_scores(&recs, &[0, 2, 4, 6]), vec![(2, 0.5), (4, 2.5), (6, 4.5)]);
    }
}
