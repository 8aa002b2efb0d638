use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::data::ImageSource;
use crate::error::{Error, Result};
use crate::model::Model;

use super::embed_images;

/// Inverse-covariance components of every image, one value per image for
/// the radius variant.
pub fn cov_values(model: &Model<f32>, source: &impl ImageSource, batch_size: usize) -> Result<Vec<f64>> {
    if !model.config.has_covariance() {
        return Err(Error::UnsupportedModel("a vanilla model has no covariance output".into()));
    }
    let emb = embed_images(model, source, source.n_images(), batch_size)?;
    // Radius estimates are broadcast across D in `embed`; keep one value.
    let width = model.config.encoder.cov_dim();
    Ok(emb.inv_cov.iter().flat_map(|s| s[..width].iter().copied()).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistogramRow {
    /// Bin index relative to the modal bin.
    pub offset: i64,
    pub clean: usize,
    pub damaged: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CovHistogram {
    pub bin_width: f64,
    pub clean_mode: f64,
    pub damaged_mode: f64,
    pub clean_total: usize,
    pub damaged_total: usize,
    pub rows: Vec<HistogramRow>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Freedman-Diaconis width, falling back to a range-based width when the
/// interquartile range vanishes and to 1 for constant data.
pub fn bin_width(values: &[f64]) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let iqr = quantile(&s, 0.75) - quantile(&s, 0.25);
    let n = s.len() as f64;
    if iqr > 0.0 {
        return 2.0 * iqr / n.cbrt();
    }
    let range = s[s.len() - 1] - s[0];
    if range > 0.0 {
        range / n.sqrt().ceil()
    } else {
        1.0
    }
}

fn binned(values: &[f64], origin: f64, width: f64) -> BTreeMap<i64, usize> {
    let mut counts = BTreeMap::new();
    for v in values {
        *counts.entry(((v - origin) / width).floor() as i64).or_insert(0) += 1;
    }
    counts
}

fn mode_bin(counts: &BTreeMap<i64, usize>) -> i64 {
    let mut best = (i64::MIN, 0);
    for (&b, &c) in counts {
        if c > best.1 {
            best = (b, c);
        }
    }
    best.0
}

impl CovHistogram {
    /// Aligned histograms of two value sets on a shared grid whose width
    /// comes from the clean values; each is shifted so its modal bin sits
    /// at offset 0.
    pub fn build(clean: &[f64], damaged: &[f64]) -> Result<Self> {
        if clean.is_empty() || damaged.is_empty() {
            return Err(Error::Contract("histograms need values from both datasets".into()));
        }
        let width = bin_width(clean);
        let origin = clean.iter().copied().fold(f64::INFINITY, f64::min);
        let c = binned(clean, origin, width);
        let d = binned(damaged, origin, width);
        let (mc, md) = (mode_bin(&c), mode_bin(&d));
        let mut rows: BTreeMap<i64, HistogramRow> = BTreeMap::new();
        for (&b, &n) in &c {
            rows.entry(b - mc).or_insert(HistogramRow { offset: b - mc, clean: 0, damaged: 0 }).clean = n;
        }
        for (&b, &n) in &d {
            rows.entry(b - md).or_insert(HistogramRow { offset: b - md, clean: 0, damaged: 0 }).damaged = n;
        }
        Ok(CovHistogram {
            bin_width: width,
            clean_mode: origin + (mc as f64 + 0.5) * width,
            damaged_mode: origin + (md as f64 + 0.5) * width,
            clean_total: clean.len(),
            damaged_total: damaged.len(),
            rows: rows.into_values().collect(),
        })
    }

    /// Fraction of clean and damaged values above their modal bin.
    pub fn tail_mass_above(&self) -> (f64, f64) {
        let (c, d) = self
            .rows
            .iter()
            .filter(|r| r.offset > 0)
            .fold((0, 0), |(c, d), r| (c + r.clean, d + r.damaged));
        (c as f64 / self.clean_total as f64, d as f64 / self.damaged_total as f64)
    }

    /// Fraction of clean and damaged values below their modal bin.
    pub fn tail_mass_below(&self) -> (f64, f64) {
        let (c, d) = self
            .rows
            .iter()
            .filter(|r| r.offset < 0)
            .fold((0, 0), |(c, d), r| (c + r.clean, d + r.damaged));
        (c as f64 / self.clean_total as f64, d as f64 / self.damaged_total as f64)
    }

    pub fn write_csv(&self, path: &Path, note: &str) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "# {note}").expect("write to Vec");
        writeln!(
            out,
            "# bin_width={} clean_mode={} damaged_mode={}",
            self.bin_width, self.clean_mode, self.damaged_mode
        )
        .expect("write to Vec");
        writeln!(out, "offset,aligned_center,clean,damaged").expect("write to Vec");
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.offset, r.offset as f64 * self.bin_width, r.clean, r.damaged)
                .expect("write to Vec");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Covariance values of a clean and a damaged dataset, histogrammed and
/// mode-aligned.
pub fn export_cov_histogram(
    model: &Model<f32>,
    clean: &impl ImageSource,
    damaged: &impl ImageSource,
    batch_size: usize,
) -> Result<CovHistogram> {
    let c = cov_values(model, clean, batch_size)?;
    let d = cov_values(model, damaged, batch_size)?;
    CovHistogram::build(&c, &d)
}
