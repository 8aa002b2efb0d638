//! Checkpoint files.
//!
//! Layout: an 8-byte little-endian header length, a JSON header, then one
//! blob per tensor in declaration order. Each blob is an 8-byte
//! little-endian byte count followed by little-endian `f32` values. Running
//! batch-norm statistics and Adam moments, when present, follow the
//! parameters in the order listed in the header.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::autodiff::BatchStats;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamEntry {
    pub config: AdamConfig,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub seed: u64,
    pub episode: u64,
    /// Mean training accuracy over the episodes since the previous
    /// checkpoint; `None` for the initial checkpoint.
    pub train_acc: Option<f64>,
    pub tensors: Vec<TensorEntry>,
    pub running_stats: bool,
    pub adam: Option<AdamEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model<f32>,
    pub adam: Option<Vec<AdamState<f32>>>,
}

fn write_blob(out: &mut Vec<u8>, data: &[f32]) {
    out.extend_from_slice(&((data.len() * 4) as u64).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Writes a checkpoint. The file is written next to `path` and renamed
/// into place so an interrupted write never leaves a truncated checkpoint.
pub fn save(
    path: &Path,
    model: &Model<f32>,
    seed: u64,
    episode: u64,
    train_acc: Option<f64>,
    adam: Option<&[AdamState<f32>]>,
) -> Result<()> {
    let named = model.named_tensors();
    if let Some(states) = adam {
        if states.len() != named.len() {
            return Err(Error::Checkpoint(format!(
                "{} adam states for {} tensors",
                states.len(),
                named.len()
            )));
        }
    }
    let running_stats = model.encoder.blocks.iter().all(|b| b.running.is_some());
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        model: model.config.clone(),
        seed,
        episode,
        train_acc,
        tensors: named.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        running_stats,
        adam: adam.map(|s| AdamEntry {
            config: s.first().map(|a| a.config).unwrap_or_default(),
            step: s.first().map_or(0, |a| a.t),
        }),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &named {
        write_blob(&mut out, t.data());
    }
    if running_stats {
        for b in &model.encoder.blocks {
            let r = b.running.as_ref().expect("checked above");
            write_blob(&mut out, &r.mean);
            write_blob(&mut out, &r.var);
        }
    }
    if let Some(states) = adam {
        for s in states {
            write_blob(&mut out, &s.m);
            write_blob(&mut out, &s.v);
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&out).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated file: wanted {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn blob(&mut self, expected: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.u64()? as usize;
        if bytes != expected * 4 {
            return Err(Error::Checkpoint(format!("{what}: blob holds {bytes} bytes, expected {}", expected * 4)));
        }
        Ok(self
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

/// Reads only the JSON header.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut len = [0u8; 8];
    f.read_exact(&mut len).map_err(|_| Error::Checkpoint(format!("{}: missing header", path.display())))?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    f.read_exact(&mut json).map_err(|_| Error::Checkpoint(format!("{}: truncated header", path.display())))?;
    parse_header(&json)
}

fn parse_header(json: &[u8]) -> Result<CheckpointHeader> {
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    Ok(header)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    let hlen = r.u64()? as usize;
    let header = parse_header(r.take(hlen)?)?;

    // Rebuild the skeleton from the config, then check the manifest
    // against it before filling in values.
    let mut model = Model::<f32>::build(header.model.clone(), 0)?;
    let expected: Vec<TensorEntry> = model
        .named_tensors()
        .iter()
        .map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() })
        .collect();
    if expected != header.tensors {
        return Err(Error::Checkpoint("tensor manifest does not match the model configuration".into()));
    }
    for (entry, t) in header.tensors.iter().zip(model.tensors_mut()) {
        let data = r.blob(t.len(), &entry.name)?;
        *t = Tensor::new(entry.shape.clone(), data)?;
    }
    for b in &mut model.encoder.blocks {
        b.running = None;
    }
    if header.running_stats {
        for (i, b) in model.encoder.blocks.iter_mut().enumerate() {
            let c = b.bias.len();
            let mean = r.blob(c, &format!("block{i}.running_mean"))?;
            let var = r.blob(c, &format!("block{i}.running_var"))?;
            b.running = Some(BatchStats { mean, var });
        }
    }
    let adam = match &header.adam {
        None => None,
        Some(entry) => {
            let mut states = Vec::with_capacity(header.tensors.len());
            for (e, (_, t)) in header.tensors.iter().zip(model.named_tensors()) {
                let m = r.blob(t.len(), &format!("{}.adam_m", e.name))?;
                let v = r.blob(t.len(), &format!("{}.adam_v", e.name))?;
                states.push(AdamState { m, v, t: entry.step, config: entry.config });
            }
            Some(states)
        }
    };
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(Checkpoint { header, model, adam })
}
