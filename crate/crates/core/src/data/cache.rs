//! Binary dataset cache: 8-byte magic, `u32` version, `u64` metadata
//! length, JSON metadata, then one block of 784 little-endian `f32` per
//! image in class-major order.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::IMAGE_PIXELS;
use crate::error::{Error, Result};

use super::dataset::{ClassInfo, Dataset, Split};

pub const CACHE_MAGIC: [u8; 8] = *b"GPNDATA\0";
pub const CACHE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheHeader {
    pub split: Split,
    pub augmented: bool,
    pub n_classes: usize,
    pub n_images: usize,
    pub examples_per_class: usize,
    pub classes: Vec<ClassInfo>,
    /// `(image index, target size)` for every damaged image.
    pub damage: Vec<(usize, u32)>,
}

pub fn write_cache(dataset: &Dataset, path: &Path) -> Result<()> {
    let header = CacheHeader {
        split: dataset.split,
        augmented: dataset.augmented,
        n_classes: dataset.classes.len(),
        n_images: dataset.damage.len(),
        examples_per_class: dataset.examples_per_class,
        classes: dataset.classes.clone(),
        damage: dataset.damage.iter().enumerate().filter_map(|(i, d)| d.map(|t| (i, t))).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let tmp = path.with_extension("tmp");
    let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(&tmp, e);
    w.write_all(&CACHE_MAGIC).map_err(io)?;
    w.write_all(&CACHE_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    let mut bytes = Vec::with_capacity(IMAGE_PIXELS * 4);
    for img in dataset.pixels.chunks_exact(IMAGE_PIXELS) {
        bytes.clear();
        img.iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
        w.write_all(&bytes).map_err(io)?;
    }
    w.into_inner().map_err(|e| Error::io(&tmp, e.into_error()))?.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_prefix(r: &mut impl Read, path: &Path) -> Result<CacheHeader> {
    let mut magic = [0u8; 8];
    let mut ver = [0u8; 4];
    let mut len = [0u8; 8];
    let short = |_| Error::Cache(format!("{}: truncated header", path.display()));
    r.read_exact(&mut magic).map_err(short)?;
    if magic != CACHE_MAGIC {
        return Err(Error::Cache(format!("{}: not a dataset cache (bad magic)", path.display())));
    }
    r.read_exact(&mut ver).map_err(short)?;
    let version = u32::from_le_bytes(ver);
    if version != CACHE_VERSION {
        return Err(Error::Cache(format!(
            "{}: cache version {version}, expected {CACHE_VERSION}",
            path.display()
        )));
    }
    r.read_exact(&mut len).map_err(short)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(short)?;
    let header: CacheHeader =
        serde_json::from_slice(&json).map_err(|e| Error::Cache(format!("{}: bad metadata: {e}", path.display())))?;
    if header.n_classes != header.classes.len() || header.n_images != header.n_classes * header.examples_per_class {
        return Err(Error::Cache(format!("{}: inconsistent metadata counts", path.display())));
    }
    Ok(header)
}

pub fn read_cache_header(path: &Path) -> Result<CacheHeader> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_prefix(&mut f, path)
}

/// Reads a whole cache. Any size mismatch is an error; no partial dataset
/// is ever returned.
pub fn read_cache(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = &bytes[..];
    let header = read_prefix(&mut cursor, path)?;
    let want = header.n_images * IMAGE_PIXELS * 4;
    if cursor.len() != want {
        return Err(Error::Cache(format!(
            "{}: {} bytes of image data, expected {want}",
            path.display(),
            cursor.len()
        )));
    }
    let pixels = cursor.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    let mut ds = Dataset::new(header.split, header.examples_per_class, header.classes, pixels)?;
    ds.augmented = header.augmented;
    for (i, t) in header.damage {
        *ds.damage
            .get_mut(i)
            .ok_or_else(|| Error::Cache(format!("damage entry for image {i} out of range")))? = Some(t);
    }
    Ok(ds)
}
