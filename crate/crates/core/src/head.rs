//! Embedding-space math for Gaussian prototypical networks.
//!
//! Raw covariance outputs are mapped to inverse covariances `s`, support
//! embeddings are fused into covariance-weighted prototypes and queries are
//! scored by a covariance-weighted distance. Everything exists twice: as
//! plain `f64` functions used for inference and as a reference, and as tape
//! operations used for training.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softplus, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// How a raw covariance output becomes an inverse covariance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceTransform {
    /// `1 + softplus(raw)`, unbounded above.
    #[default]
    SoftplusOffset,
    /// `1 + sigmoid(raw)`, in `(1, 2)`.
    SigmoidOffset,
    /// `1 + 4 sigmoid(raw)`, in `(1, 5)`.
    SigmoidScaled4,
    /// `offset + scale * softplus(raw / div)` with trainable scalars.
    TrainableSoftplus,
}

/// Monotone map applied to the covariance-weighted distance before it is
/// negated into a logit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceTransform {
    #[default]
    Linear,
    Squared,
    Sqrt,
    /// `1 - cos(query, prototype)`; ignores the covariance.
    Cosine,
}

/// The trainable scalars of [`CovarianceTransform::TrainableSoftplus`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformScalars {
    pub offset: f64,
    pub scale: f64,
    pub div: f64,
}

impl Default for TransformScalars {
    fn default() -> Self {
        TransformScalars { offset: 1.0, scale: 1.0, div: 1.0 }
    }
}

impl CovarianceTransform {
    pub fn apply(self, raw: f64, scalars: &TransformScalars) -> f64 {
        match self {
            CovarianceTransform::SoftplusOffset => 1.0 + softplus(raw),
            CovarianceTransform::SigmoidOffset => 1.0 + sigmoid(raw),
            CovarianceTransform::SigmoidScaled4 => 1.0 + 4.0 * sigmoid(raw),
            CovarianceTransform::TrainableSoftplus => {
                scalars.offset + scalars.scale * softplus(raw / scalars.div)
            }
        }
    }
}

impl DistanceTransform {
    /// Maps a squared weighted distance to the transformed distance.
    pub fn from_squared(self, sq: f64) -> f64 {
        match self {
            DistanceTransform::Linear => sq.sqrt(),
            DistanceTransform::Squared => sq,
            DistanceTransform::Sqrt => sq.sqrt().sqrt(),
            DistanceTransform::Cosine => unreachable!("cosine distance is not a function of the weighted distance"),
        }
    }
}

/// Tape handles for the transform scalars.
#[derive(Clone, Copy, Debug)]
pub struct ScalarVars {
    pub offset: Var,
    pub scale: Var,
    pub div: Var,
}

/// Applies `transform` to a `B x D_S` raw covariance output on the tape.
pub fn raw_to_inverse_cov<T: Element>(
    tape: &mut Tape<T>,
    s_raw: Var,
    transform: CovarianceTransform,
    scalars: Option<ScalarVars>,
) -> Result<Var> {
    match transform {
        CovarianceTransform::SoftplusOffset => {
            let v = tape.softplus(s_raw)?;
            tape.affine(v, 1.0, 1.0)
        }
        CovarianceTransform::SigmoidOffset => {
            let v = tape.sigmoid(s_raw)?;
            tape.affine(v, 1.0, 1.0)
        }
        CovarianceTransform::SigmoidScaled4 => {
            let v = tape.sigmoid(s_raw)?;
            tape.affine(v, 4.0, 1.0)
        }
        CovarianceTransform::TrainableSoftplus => {
            let sv = scalars.ok_or_else(|| {
                Error::Contract("trainable softplus transform needs offset/scale/div on the tape".into())
            })?;
            let v = tape.div_scalar(s_raw, sv.div)?;
            let v = tape.softplus(v)?;
            let v = tape.mul_scalar(v, sv.scale)?;
            tape.add_scalar(v, sv.offset)
        }
    }
}

/// A class centroid with the diagonal of its inverse covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrototype {
    pub centroid: Vec<f64>,
    pub inv_cov: Vec<f64>,
}

/// Covariance-weighted centroid and summed inverse covariance of one class.
pub fn fuse_prototype(embeddings: &[&[f64]], inv_covs: &[&[f64]]) -> Result<ClassPrototype> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::Contract("cannot fuse a prototype from an empty support set".into()))?;
    let d = first.len();
    if inv_covs.len() != embeddings.len() {
        return Err(Error::shape(
            "fuse_prototype",
            format!("{} embeddings but {} inverse covariances", embeddings.len(), inv_covs.len()),
        ));
    }
    if embeddings.iter().chain(inv_covs).any(|v| v.len() != d) {
        return Err(Error::shape("fuse_prototype", format!("support vectors must all have length {d}")));
    }
    if inv_covs.iter().flat_map(|s| s.iter()).any(|&s| !(s > 0.0)) {
        return Err(Error::Contract("inverse covariance components must be positive".into()));
    }
    let mut num = vec![0.0; d];
    let mut total = vec![0.0; d];
    for (x, s) in embeddings.iter().zip(inv_covs) {
        for k in 0..d {
            num[k] += s[k] * x[k];
            total[k] += s[k];
        }
    }
    // A single support point is its own prototype, bit for bit.
    let centroid = if embeddings.len() == 1 {
        first.to_vec()
    } else {
        num.iter().zip(&total).map(|(n, t)| n / t).collect()
    };
    Ok(ClassPrototype { centroid, inv_cov: total })
}

/// Squared covariance-weighted distance `sum_k s_k (x_k - p_k)^2`.
pub fn squared_distance(query: &[f64], proto: &ClassPrototype) -> f64 {
    query
        .iter()
        .zip(&proto.centroid)
        .zip(&proto.inv_cov)
        .map(|((x, p), s)| s * (x - p) * (x - p))
        .sum()
}

/// Linear covariance-weighted distance.
pub fn distance(query: &[f64], proto: &ClassPrototype) -> f64 {
    squared_distance(query, proto).sqrt()
}

pub fn cosine_distance(query: &[f64], centroid: &[f64]) -> f64 {
    let dot: f64 = query.iter().zip(centroid).map(|(a, b)| a * b).sum();
    let nq = query.iter().map(|a| a * a).sum::<f64>().sqrt();
    let np = centroid.iter().map(|a| a * a).sum::<f64>().sqrt();
    1.0 - dot / (nq * np)
}

/// Transformed distance from `query` to every prototype.
pub fn distances(query: &[f64], prototypes: &[ClassPrototype], transform: DistanceTransform) -> Vec<f64> {
    prototypes
        .iter()
        .map(|p| match transform {
            DistanceTransform::Cosine => cosine_distance(query, &p.centroid),
            t => t.from_squared(squared_distance(query, p)),
        })
        .collect()
}

/// Index of the smallest value; the lowest index wins ties.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Nearest prototype under the linear distance for every query.
pub fn classify(queries: &[&[f64]], prototypes: &[ClassPrototype]) -> Result<Vec<usize>> {
    classify_with(queries, prototypes, DistanceTransform::Linear)
}

pub fn classify_with(
    queries: &[&[f64]],
    prototypes: &[ClassPrototype],
    transform: DistanceTransform,
) -> Result<Vec<usize>> {
    if prototypes.len() < 2 {
        return Err(Error::Contract(format!("classification needs at least 2 prototypes, got {}", prototypes.len())));
    }
    Ok(queries.iter().map(|q| argmin(&distances(q, prototypes, transform))).collect())
}

/// Mean softmax cross-entropy of `-distance` logits over the queries.
pub fn episode_loss(
    queries: &[&[f64]],
    labels: &[usize],
    prototypes: &[ClassPrototype],
    transform: DistanceTransform,
) -> Result<f64> {
    if queries.len() != labels.len() {
        return Err(Error::shape("episode_loss", format!("{} queries, {} labels", queries.len(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= prototypes.len()) {
        return Err(Error::Index(format!("label {bad} out of range for {} prototypes", prototypes.len())));
    }
    let mut total = 0.0;
    for (q, &label) in queries.iter().zip(labels) {
        let logits: Vec<f64> = distances(q, prototypes, transform).iter().map(|d| -d).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        total += z.ln() - (logits[label] - max);
    }
    Ok(total / queries.len() as f64)
}

/// Index bookkeeping for an episode laid out in one encoded batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodeLayout {
    pub n_classes: usize,
    pub support_rows: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query_rows: Vec<usize>,
    pub query_labels: Vec<usize>,
}

/// Result of running the head over one episode on the tape.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    pub loss: Var,
    /// `Q x N` transformed distances.
    pub distances: Var,
    /// Class centroids `N x D` and summed inverse covariances `N x D`.
    pub centroids: Var,
    pub class_inv_cov: Var,
    pub predictions: Vec<usize>,
    pub accuracy: f64,
}

/// Builds prototypes from the support rows of `embeddings`, scores the query
/// rows and returns the mean cross-entropy loss.
///
/// `inv_cov` is `None` for a vanilla network (all-ones weights), `B x 1` for
/// a radius estimate or `B x D` for a diagonal one.
pub fn episode_forward<T: Element>(
    tape: &mut Tape<T>,
    embeddings: Var,
    inv_cov: Option<Var>,
    layout: &EpisodeLayout,
    transform: DistanceTransform,
) -> Result<HeadOutput> {
    let (b, d) = match *tape.value(embeddings).shape() {
        [b, d] => (b, d),
        ref s => return Err(Error::shape("episode_forward", format!("expected B x D embeddings, got {s:?}"))),
    };
    if layout.n_classes < 2 {
        return Err(Error::Contract("an episode needs at least 2 classes".into()));
    }
    let weights = match inv_cov {
        None => tape.constant(Tensor::full([b, d], T::one())),
        Some(s) => match *tape.value(s).shape() {
            [rows, 1] if rows == b => tape.broadcast_cols(s, d)?,
            [rows, w] if rows == b && w == d => s,
            ref other => {
                return Err(Error::shape(
                    "episode_forward",
                    format!("inverse covariance {other:?} does not fit embeddings [{b}, {d}]"),
                ))
            }
        },
    };
    let sup = tape.gather_rows(embeddings, &layout.support_rows)?;
    let sup_w = tape.gather_rows(weights, &layout.support_rows)?;
    let centroids = tape.segment_weighted_mean(sup, sup_w, &layout.support_labels, layout.n_classes)?;
    let class_inv_cov = tape.segment_sum(sup_w, &layout.support_labels, layout.n_classes)?;
    let queries = tape.gather_rows(embeddings, &layout.query_rows)?;
    let dist = match transform {
        DistanceTransform::Cosine => tape.cosine_distance(queries, centroids)?,
        t => {
            let sq = tape.weighted_sq_distance(queries, centroids, class_inv_cov)?;
            match t {
                DistanceTransform::Squared => sq,
                DistanceTransform::Linear => tape.sqrt(sq)?,
                _ => {
                    let r = tape.sqrt(sq)?;
                    tape.sqrt(r)?
                }
            }
        }
    };
    let logits = tape.affine(dist, -1.0, 0.0)?;
    let loss = tape.softmax_cross_entropy(logits, &layout.query_labels)?;

    let n = layout.n_classes;
    let predictions: Vec<usize> = tape
        .value(dist)
        .data()
        .chunks_exact(n)
        .map(|row| argmin(&row.iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>()))
        .collect();
    let correct = predictions.iter().zip(&layout.query_labels).filter(|(p, l)| p == l).count();
    let accuracy = if predictions.is_empty() { 0.0 } else { correct as f64 / predictions.len() as f64 };
    Ok(HeadOutput { loss, distances: dist, centroids, class_inv_cov, predictions, accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn proto(c: &[f64], s: &[f64]) -> ClassPrototype {
        ClassPrototype { centroid: c.to_vec(), inv_cov: s.to_vec() }
    }

    #[test]
    fn transform_values_at_zero() {
        let sc = TransformScalars::default();
        assert_relative_eq!(CovarianceTransform::SoftplusOffset.apply(0.0, &sc), 1.0 + 2f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(CovarianceTransform::SigmoidOffset.apply(0.0, &sc), 1.5);
        assert_relative_eq!(CovarianceTransform::SigmoidScaled4.apply(0.0, &sc), 3.0);
        assert_relative_eq!(CovarianceTransform::TrainableSoftplus.apply(0.0, &sc), 1.693147, epsilon = 1e-6);
        assert!(CovarianceTransform::SigmoidOffset.apply(1e6, &sc) <= 2.0);
    }

    #[test]
    fn fused_prototype_by_hand() {
        let p = fuse_prototype(&[&[1.0], &[4.0]], &[&[2.0], &[1.0]]).unwrap();
        assert_relative_eq!(p.centroid[0], 2.0);
        assert_relative_eq!(p.inv_cov[0], 3.0);
    }

    #[test]
    fn single_support_is_the_prototype() {
        let x = [0.1, -3.7, 2.25];
        let s = [1.3, 2.0, 9.0];
        let p = fuse_prototype(&[&x], &[&s]).unwrap();
        assert_eq!(p.centroid, x);
        assert_eq!(p.inv_cov, s);
    }

    #[test]
    fn equal_weights_give_the_mean() {
        let p = fuse_prototype(&[&[1.0, 2.0], &[3.0, 6.0]], &[&[0.5, 0.5], &[0.5, 0.5]]).unwrap();
        assert_eq!(p.centroid, vec![2.0, 4.0]);
    }

    #[test]
    fn empty_support_is_a_contract_error() {
        assert!(matches!(fuse_prototype(&[], &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn distance_by_hand() {
        assert_relative_eq!(distance(&[1.0, 1.0], &proto(&[0.0, 0.0], &[4.0, 1.0])), 5f64.sqrt());
        assert_eq!(distance(&[2.0, 3.0], &proto(&[2.0, 3.0], &[1.0, 7.0])), 0.0);
        assert_relative_eq!(distance(&[3.0, 4.0], &proto(&[0.0, 0.0], &[1.0, 1.0])), 5.0);
    }

    #[test]
    fn covariance_changes_the_winner() {
        let protos = [proto(&[0.0], &[1.0]), proto(&[3.0], &[9.0])];
        assert_eq!(classify(&[&[2.0]], &protos).unwrap(), vec![0]);
    }

    #[test]
    fn ties_go_to_the_lowest_index() {
        let protos = [proto(&[1.0], &[1.0]), proto(&[-1.0], &[1.0])];
        assert_eq!(classify(&[&[0.0]], &protos).unwrap(), vec![0]);
    }

    #[test]
    fn loss_by_hand() {
        let protos = [proto(&[0.0], &[1.0]), proto(&[2.0], &[1.0])];
        let l = episode_loss(&[&[0.0]], &[0], &protos, DistanceTransform::Linear).unwrap();
        assert_relative_eq!(l, (1.0 + (-2f64).exp()).ln(), epsilon = 1e-12);
        assert_relative_eq!(l, 0.126928, epsilon = 1e-6);
    }

    #[test]
    fn tape_head_matches_reference() {
        let emb = vec![0.0, 1.0, 2.0, -1.0, 0.5, 0.5, 3.0, 1.0, -2.0, 2.0, 1.0, 1.0];
        let s = vec![1.5, 2.0, 1.1, 3.0, 1.2, 1.7];
        let layout = EpisodeLayout {
            n_classes: 2,
            support_rows: vec![0, 1, 2, 3],
            support_labels: vec![0, 0, 1, 1],
            query_rows: vec![4, 5],
            query_labels: vec![1, 0],
        };
        let mut tape = Tape::<f64>::new();
        let e = tape.constant(Tensor::new([6, 2], emb.clone()).unwrap());
        let sv = tape.constant(Tensor::new([6, 1], s.clone()).unwrap());
        let out = episode_forward(&mut tape, e, Some(sv), &layout, DistanceTransform::Linear).unwrap();

        let row = |i: usize| &emb[2 * i..2 * i + 2];
        let sr = |i: usize| vec![s[i]; 2];
        let (s0, s1, s2, s3) = (sr(0), sr(1), sr(2), sr(3));
        let protos = [
            fuse_prototype(&[row(0), row(1)], &[&s0, &s1]).unwrap(),
            fuse_prototype(&[row(2), row(3)], &[&s2, &s3]).unwrap(),
        ];
        let want = episode_loss(&[row(4), row(5)], &[1, 0], &protos, DistanceTransform::Linear).unwrap();
        assert_relative_eq!(tape.value(out.loss).data()[0], want, epsilon = 1e-12);
        assert_eq!(out.predictions, classify(&[row(4), row(5)], &protos).unwrap());
    }
}
