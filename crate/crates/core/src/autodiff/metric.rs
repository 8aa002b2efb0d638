//! Differentiable prototype construction and prototype distances.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

use super::tape::{GradSink, Node, Op, Tape, Var};

fn matrix(op: &'static str, t: &Tensor<impl Element>) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::shape(op, format!("expected a 2-d tensor, got {:?}", t.shape()))),
    }
}

fn check_groups(op: &'static str, groups: &[usize], rows: usize, n: usize) -> Result<()> {
    if groups.len() != rows {
        return Err(Error::shape(op, format!("{} group labels for {rows} rows", groups.len())));
    }
    let mut seen = vec![false; n];
    for &g in groups {
        if g >= n {
            return Err(Error::Index(format!("{op}: group {g} out of range for {n} groups")));
        }
        seen[g] = true;
    }
    if let Some(empty) = seen.iter().position(|s| !s) {
        return Err(Error::Contract(format!("{op}: group {empty} has no members")));
    }
    Ok(())
}

impl<T: Element> Tape<T> {
    /// Sums the rows of `input` that share a group label: `out[g] = sum of rows r with groups[r] == g`.
    pub fn segment_sum(&mut self, input: Var, groups: &[usize], n_groups: usize) -> Result<Var> {
        let (rows, d) = matrix("segment_sum", self.value(input))?;
        check_groups("segment_sum", groups, rows, n_groups)?;
        let x = self.value(input).data();
        let mut out = vec![T::zero(); n_groups * d];
        for (r, &grp) in groups.iter().enumerate() {
            super::tape::add_into(&mut out[grp * d..(grp + 1) * d], &x[r * d..(r + 1) * d]);
        }
        let value = Tensor::new([n_groups, d], out)?;
        let rg = self.requires_grad(input);
        self.push("segment_sum", value, Op::SegmentSum { input, groups: groups.to_vec() }, rg)
    }

    /// Componentwise weighted mean per group:
    /// `out[g] = sum_r w_r * x_r / sum_r w_r` over rows in group `g`.
    pub fn segment_weighted_mean(
        &mut self,
        points: Var,
        weights: Var,
        groups: &[usize],
        n_groups: usize,
    ) -> Result<Var> {
        let (rows, d) = matrix("segment_weighted_mean", self.value(points))?;
        if self.value(weights).shape() != self.value(points).shape() {
            return Err(Error::shape(
                "segment_weighted_mean",
                format!(
                    "weights {:?} do not match points {:?}",
                    self.value(weights).shape(),
                    self.value(points).shape()
                ),
            ));
        }
        check_groups("segment_weighted_mean", groups, rows, n_groups)?;
        let x = self.value(points).data();
        let w = self.value(weights).data();
        let mut num = vec![T::zero(); n_groups * d];
        let mut totals = vec![T::zero(); n_groups * d];
        for (r, &grp) in groups.iter().enumerate() {
            for k in 0..d {
                num[grp * d + k] = num[grp * d + k] + w[r * d + k] * x[r * d + k];
                totals[grp * d + k] = totals[grp * d + k] + w[r * d + k];
            }
        }
        if let Some(i) = totals.iter().position(|&t| t <= T::zero()) {
            return Err(Error::Contract(format!(
                "segment_weighted_mean: non-positive total weight at group {} dim {}",
                i / d.max(1),
                i % d.max(1)
            )));
        }
        let out = num.iter().zip(&totals).map(|(&a, &b)| a / b).collect();
        let value = Tensor::new([n_groups, d], out)?;
        let rg = self.any_requires_grad(&[points, weights]);
        self.push(
            "segment_weighted_mean",
            value,
            Op::SegmentWeightedMean { points, weights, groups: groups.to_vec(), totals },
            rg,
        )
    }

    /// `out[i, c] = sum_k weights[c, k] * (query[i, k] - centroids[c, k])^2`.
    pub fn weighted_sq_distance(&mut self, query: Var, centroids: Var, weights: Var) -> Result<Var> {
        let (b, d) = matrix("weighted_sq_distance", self.value(query))?;
        let (n, d2) = matrix("weighted_sq_distance", self.value(centroids))?;
        if d != d2 || self.value(weights).shape() != [n, d] {
            return Err(Error::shape(
                "weighted_sq_distance",
                format!(
                    "query {:?}, centroids {:?}, weights {:?}",
                    self.value(query).shape(),
                    self.value(centroids).shape(),
                    self.value(weights).shape()
                ),
            ));
        }
        let q = self.value(query).data();
        let p = self.value(centroids).data();
        let s = self.value(weights).data();
        let mut out = Vec::with_capacity(b * n);
        for qi in q.chunks_exact(d.max(1)).take(b) {
            for c in 0..n {
                let pc = &p[c * d..(c + 1) * d];
                let sc = &s[c * d..(c + 1) * d];
                let mut acc = T::zero();
                for k in 0..d {
                    let diff = qi[k] - pc[k];
                    acc = acc + sc[k] * diff * diff;
                }
                out.push(acc);
            }
        }
        let value = Tensor::new([b, n], out)?;
        let rg = self.any_requires_grad(&[query, centroids, weights]);
        self.push(
            "weighted_sq_distance",
            value,
            Op::WeightedSqDistance { query, centroids, weights },
            rg,
        )
    }

    /// `out[i, c] = 1 - cos(query_i, centroid_c)`.
    pub fn cosine_distance(&mut self, query: Var, centroids: Var) -> Result<Var> {
        let (b, d) = matrix("cosine_distance", self.value(query))?;
        let (n, d2) = matrix("cosine_distance", self.value(centroids))?;
        if d != d2 {
            return Err(Error::shape("cosine_distance", format!("dimension {d} vs {d2}")));
        }
        let q = self.value(query).data();
        let p = self.value(centroids).data();
        let qn = row_norms(q, d);
        let pn = row_norms(p, d);
        if qn.iter().chain(&pn).any(|&v| v == T::zero()) {
            return Err(Error::Contract("cosine distance of a zero vector".into()));
        }
        let mut out = Vec::with_capacity(b * n);
        for i in 0..b {
            for c in 0..n {
                let dot: T = (0..d).map(|k| q[i * d + k] * p[c * d + k]).sum();
                out.push(T::one() - dot / (qn[i] * pn[c]));
            }
        }
        let value = Tensor::new([b, n], out)?;
        let rg = self.any_requires_grad(&[query, centroids]);
        self.push("cosine_distance", value, Op::CosineDistance { query, centroids }, rg)
    }
}

fn row_norms<T: Element>(x: &[T], d: usize) -> Vec<T> {
    x.chunks_exact(d).map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt()).collect()
}

pub(crate) fn segment_sum_backward<T: Element>(
    tape: &Tape<T>,
    input: Var,
    groups: &[usize],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let d = tape.value(input).shape()[1];
    sink.add(input, |dx| {
        for (r, &grp) in groups.iter().enumerate() {
            super::tape::add_into(&mut dx[r * d..(r + 1) * d], &g[grp * d..(grp + 1) * d]);
        }
    });
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn segment_weighted_mean_backward<T: Element>(
    tape: &Tape<T>,
    node: &Node<T>,
    points: Var,
    weights: Var,
    groups: &[usize],
    totals: &[T],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let d = tape.value(points).shape()[1];
    let x = tape.value(points).data();
    let w = tape.value(weights).data();
    let mean = node.value.data();
    sink.add(points, |dx| {
        for (r, &grp) in groups.iter().enumerate() {
            for k in 0..d {
                let gi = grp * d + k;
                dx[r * d + k] = dx[r * d + k] + g[gi] * w[r * d + k] / totals[gi];
            }
        }
    });
    sink.add(weights, |dw| {
        for (r, &grp) in groups.iter().enumerate() {
            for k in 0..d {
                let gi = grp * d + k;
                dw[r * d + k] = dw[r * d + k] + g[gi] * (x[r * d + k] - mean[gi]) / totals[gi];
            }
        }
    });
}

pub(crate) fn weighted_sq_distance_backward<T: Element>(
    tape: &Tape<T>,
    query: Var,
    centroids: Var,
    weights: Var,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let q = tape.value(query).data();
    let p = tape.value(centroids).data();
    let s = tape.value(weights).data();
    let (b, d) = (tape.value(query).shape()[0], tape.value(query).shape()[1]);
    let n = tape.value(centroids).shape()[0];
    let two = T::one() + T::one();

    let mut dq = vec![T::zero(); b * d];
    let mut dp = vec![T::zero(); n * d];
    let mut ds = vec![T::zero(); n * d];
    for i in 0..b {
        for c in 0..n {
            let gic = g[i * n + c];
            if gic == T::zero() {
                continue;
            }
            for k in 0..d {
                let diff = q[i * d + k] - p[c * d + k];
                let t = two * gic * s[c * d + k] * diff;
                dq[i * d + k] = dq[i * d + k] + t;
                dp[c * d + k] = dp[c * d + k] - t;
                ds[c * d + k] = ds[c * d + k] + gic * diff * diff;
            }
        }
    }
    sink.add(query, |acc| super::tape::add_into(acc, &dq));
    sink.add(centroids, |acc| super::tape::add_into(acc, &dp));
    sink.add(weights, |acc| super::tape::add_into(acc, &ds));
}

pub(crate) fn cosine_distance_backward<T: Element>(
    tape: &Tape<T>,
    query: Var,
    centroids: Var,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let q = tape.value(query).data();
    let p = tape.value(centroids).data();
    let (b, d) = (tape.value(query).shape()[0], tape.value(query).shape()[1]);
    let n = tape.value(centroids).shape()[0];
    let qn = row_norms(q, d);
    let pn = row_norms(p, d);
    let mut dq = vec![T::zero(); b * d];
    let mut dp = vec![T::zero(); n * d];
    for i in 0..b {
        for c in 0..n {
            let gic = g[i * n + c];
            let dot: T = (0..d).map(|k| q[i * d + k] * p[c * d + k]).sum();
            let denom = qn[i] * pn[c];
            let cos = dot / denom;
            for k in 0..d {
                // d(1 - cos) = -dcos
                let dcos_dq = p[c * d + k] / denom - cos * q[i * d + k] / (qn[i] * qn[i]);
                let dcos_dp = q[i * d + k] / denom - cos * p[c * d + k] / (pn[c] * pn[c]);
                dq[i * d + k] = dq[i * d + k] - gic * dcos_dq;
                dp[c * d + k] = dp[c * d + k] - gic * dcos_dp;
            }
        }
    }
    sink.add(query, |acc| super::tape::add_into(acc, &dq));
    sink.add(centroids, |acc| super::tape::add_into(acc, &dp));
}
