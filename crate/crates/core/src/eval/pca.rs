use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PointMeta {
    pub class_id: String,
    pub is_prototype: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaProjection {
    pub coords: Vec<[f64; 2]>,
    pub components: [Vec<f64>; 2],
    /// Variance along each component.
    pub eigenvalues: [f64; 2],
    pub total_variance: f64,
}

impl PcaProjection {
    pub fn explained_ratio(&self) -> f64 {
        (self.eigenvalues[0] + self.eigenvalues[1]) / self.total_variance
    }

    pub fn write_csv(&self, path: &Path, meta: &[PointMeta]) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "x,y,class_id,is_prototype").expect("write to Vec");
        for (c, m) in self.coords.iter().zip(meta) {
            writeln!(out, "{},{},{},{}", c[0], c[1], m.class_id, m.is_prototype as u8).expect("write to Vec");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn mat_vec(a: &[f64], v: &[f64]) -> Vec<f64> {
    let d = v.len();
    a.chunks_exact(d).map(|row| row.iter().zip(v).map(|(x, y)| x * y).sum()).collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Leading eigenvector of a symmetric positive semi-definite matrix by
/// power iteration; the sign makes the largest-magnitude entry positive.
fn leading_eigen(a: &[f64], d: usize) -> (Vec<f64>, f64) {
    // A fixed, generic start vector keeps the result deterministic.
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.1 * ((i * 7 + 3) % 11) as f64).collect();
    normalize(&mut v);
    let mut lambda = 0.0;
    for _ in 0..20_000 {
        let mut w = mat_vec(a, &v);
        let n = normalize(&mut w);
        if n == 0.0 {
            return (v, 0.0);
        }
        let delta: f64 = w.iter().zip(&v).map(|(x, y)| (x - y).abs()).sum();
        v = w;
        lambda = n;
        if delta < 1e-13 {
            break;
        }
    }
    let pivot = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
    if pivot < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    let rayleigh = v.iter().zip(mat_vec(a, &v)).map(|(x, y)| x * y).sum::<f64>();
    (v, if rayleigh.is_finite() { rayleigh } else { lambda })
}

/// Projects `M x D` embeddings onto their top two principal components.
pub fn export_pca(embeddings: &[Vec<f64>]) -> Result<PcaProjection> {
    let m = embeddings.len();
    if m < 2 {
        return Err(Error::DegenerateProjection(format!("need at least 2 points, got {m}")));
    }
    let d = embeddings[0].len();
    if d == 0 || embeddings.iter().any(|e| e.len() != d) {
        return Err(Error::shape("export_pca", "embeddings must share a positive dimension"));
    }
    let mut mean = vec![0.0; d];
    for e in embeddings {
        mean.iter_mut().zip(e).for_each(|(a, b)| *a += b / m as f64);
    }
    let centred: Vec<Vec<f64>> =
        embeddings.iter().map(|e| e.iter().zip(&mean).map(|(a, b)| a - b).collect()).collect();
    let mut cov = vec![0.0; d * d];
    for x in &centred {
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += x[i] * x[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= (m - 1) as f64;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    let total_variance: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    // Relative to the squared scale of the points, so that rounding in the
    // mean of a constant cloud still counts as zero variance.
    let scale: f64 = embeddings.iter().flatten().map(|v| v * v).sum::<f64>() / m as f64;
    if !(total_variance > 1e-20 * scale.max(1e-280)) {
        return Err(Error::DegenerateProjection("embeddings have zero variance".into()));
    }
    let (v1, l1) = leading_eigen(&cov, d);
    // Deflate and repeat for the second component.
    let mut deflated = cov.clone();
    for i in 0..d {
        for j in 0..d {
            deflated[i * d + j] -= l1 * v1[i] * v1[j];
        }
    }
    let (mut v2, l2) = leading_eigen(&deflated, d);
    // Re-orthogonalize against the first component.
    let dot: f64 = v1.iter().zip(&v2).map(|(a, b)| a * b).sum();
    v2.iter_mut().zip(&v1).for_each(|(b, a)| *b -= dot * a);
    normalize(&mut v2);
    let coords = centred
        .iter()
        .map(|x| [x.iter().zip(&v1).map(|(a, b)| a * b).sum(), x.iter().zip(&v2).map(|(a, b)| a * b).sum()])
        .collect();
    Ok(PcaProjection { coords, components: [v1, v2], eigenvalues: [l1, l2.max(0.0)], total_variance })
}
