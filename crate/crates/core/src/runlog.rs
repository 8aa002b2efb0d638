//! Training output directory: metrics CSV plus numbered checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::adam::AdamState;
use crate::checkpoint;
use crate::episodes::{EpisodeRecord, TrainObserver};
use crate::error::{Error, Result};
use crate::model::Model;

pub const METRICS_HEADER: &str = "episode,lr,loss,train_acc";

pub fn checkpoint_name(episode: u64) -> String {
    format!("ckpt_{episode:08}.bin")
}

/// Writes `metrics.csv` and `checkpoints/ckpt_*.bin` under a run directory.
pub struct RunDir {
    pub root: PathBuf,
    seed: u64,
    save_optimizer: bool,
    metrics: BufWriter<File>,
}

impl RunDir {
    /// Creates the directory layout. With `append`, an existing metrics
    /// file is continued instead of replaced.
    pub fn create(root: &Path, seed: u64, save_optimizer: bool, append: bool) -> Result<Self> {
        let ckpts = root.join("checkpoints");
        fs::create_dir_all(&ckpts).map_err(|e| Error::io(&ckpts, e))?;
        let path = root.join("metrics.csv");
        let fresh = !append || !path.exists();
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(!fresh)
            .truncate(fresh)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut metrics = BufWriter::new(file);
        if fresh {
            writeln!(metrics, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(RunDir { root: root.to_path_buf(), seed, save_optimizer, metrics })
    }

    pub fn checkpoint_path(&self, episode: u64) -> PathBuf {
        self.root.join("checkpoints").join(checkpoint_name(episode))
    }

    fn flush(&mut self) -> Result<()> {
        let path = self.root.join("metrics.csv");
        self.metrics.flush().map_err(|e| Error::io(path, e))
    }
}

impl TrainObserver for RunDir {
    fn episode(&mut self, r: &EpisodeRecord) -> Result<()> {
        writeln!(self.metrics, "{},{},{},{}", r.episode, r.lr, r.loss, r.train_acc)
            .map_err(|e| Error::io(self.root.join("metrics.csv"), e))
    }

    fn checkpoint(&mut self, episode: u64, acc: Option<f64>, model: &Model<f32>, adam: &[AdamState<f32>]) -> Result<()> {
        self.flush()?;
        let adam = self.save_optimizer.then_some(adam);
        checkpoint::save(&self.checkpoint_path(episode), model, self.seed, episode, acc, adam)
    }

    fn aborted(&mut self, episode: u64, model: &Model<f32>, reason: &str) -> Result<()> {
        self.flush()?;
        let path = self.root.join("aborted.bin");
        checkpoint::save(&path, model, self.seed, episode, None, None)?;
        let note = self.root.join("aborted.txt");
        fs::write(&note, format!("episode {episode}: {reason}\n")).map_err(|e| Error::io(note, e))
    }
}

/// Parses a metrics CSV written by [`RunDir`].
pub fn read_metrics(path: &Path) -> Result<Vec<EpisodeRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Config(format!("{}: expected header `{METRICS_HEADER}`", path.display())));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = || Error::Config(format!("{}: malformed line {}: {line}", path.display(), i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(EpisodeRecord {
                episode: f[0].parse().map_err(|_| bad())?,
                lr: f[1].parse().map_err(|_| bad())?,
                loss: f[2].parse().map_err(|_| bad())?,
                train_acc: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// `(episode, path)` of every checkpoint in a directory, sorted by episode.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(ep) = name.strip_prefix("ckpt_").and_then(|s| s.strip_suffix(".bin")) {
            if let Ok(ep) = ep.parse() {
                out.push((ep, path));
            }
        }
    }
    out.sort();
    Ok(out)
}
